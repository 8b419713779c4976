"""Ensemble approximations: stochastic EnKF with perturbed observations,
deterministic ensemble square-root filter, and the LETKF family with
R-localization and multiplicative inflation.

All variants share the robust-update algebra: the regular filter is the
constant-kernel special case, the score-matching (DSM) variants rescale the
observation covariance and correct the observation, and the
weighted-likelihood (WoLF) variants inflate it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._linalg import SpdFactor, psd_sym_sqrt, symmetrize
from .lgss import GaussianBelief, ObservationModel
from .weights import (
    CONSTANT,
    IMQ,
    OBS_ANOMALY,
    WeightKernelSpec,
    corrected_observation,
    default_threshold,
    eval_kernel,
    rescaled_obs_cov,
)
from .analysis import WolfSpec

__all__ = [
    "EnsembleState",
    "LetkfConfig",
    "Localization",
    "AnomalyAnalysis",
    "ensemble_forecast",
    "enkf_perturbed_analysis",
    "esrf_analysis",
    "letkf_analysis",
    "anomaly_posterior_cov",
    "solve_anomaly_analysis",
]

# A member propagator: maps a (d_X, M) member matrix to the next one, drawing
# any process noise from the supplied generator.
DynamicsSampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class EnsembleState:
    """d_X x M member matrix with cached mean and anomalies."""

    members: np.ndarray

    def __post_init__(self):
        members = np.atleast_2d(np.asarray(self.members, dtype=float))
        if members.shape[1] < 2:
            raise ValueError("an ensemble needs at least two members")
        object.__setattr__(self, "members", members)

    @property
    def d_x(self) -> int:
        return self.members.shape[0]

    @property
    def size(self) -> int:
        return self.members.shape[1]

    @property
    def mean(self) -> np.ndarray:
        cached = self.__dict__.get("_mean")
        if cached is None:
            cached = self.members.mean(axis=1)
            object.__setattr__(self, "_mean", cached)
        return cached

    @property
    def anomalies(self) -> np.ndarray:
        """Centered members as columns; columns sum to zero."""
        cached = self.__dict__.get("_anomalies")
        if cached is None:
            cached = self.members - self.mean[:, None]
            object.__setattr__(self, "_anomalies", cached)
        return cached

    @property
    def cov(self) -> np.ndarray:
        """Empirical covariance X X^T / (M - 1)."""
        x = self.anomalies
        return symmetrize(x @ x.T / (self.size - 1))


def ensemble_forecast(
    dynamics: DynamicsSampler,
    ensemble: EnsembleState,
    rng: np.random.Generator,
) -> EnsembleState:
    """Propagate every member independently through the dynamics sampler."""
    with np.errstate(over="ignore", invalid="ignore"):
        # Overflow of a diverging member is reported via the finite check
        # below, not as a warning mid-propagation.
        propagated = np.asarray(dynamics(ensemble.members, rng), dtype=float)
    if propagated.shape != ensemble.members.shape:
        raise ValueError(
            f"dynamics returned shape {propagated.shape}, expected {ensemble.members.shape}"
        )
    if not np.all(np.isfinite(propagated)):
        raise FloatingPointError("ensemble forecast produced non-finite members")
    return EnsembleState(members=propagated)


def _effective_obs_cov(
    obs: ObservationModel,
    spec: WeightKernelSpec | WolfSpec,
    y: np.ndarray,
    center: np.ndarray,
    marginal_cov: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Effective observation covariance and target observation for one update.

    Returns (effective R, target observation, scalar weight diagnostic).
    For a kernel spec this is (N(y), corrected observation, k^2); for a WoLF
    spec it is (R / r^2, y, r^2 / 2).
    """
    r = obs.R
    if isinstance(spec, WolfSpec):
        c_sq = spec.c_sq if spec.c_sq is not None else float(obs.d_y)
        residual = y - center
        if spec.variant == "md":
            s = obs.r_factor.mahalanobis_sq(residual)
            r_sq = 1.0 / (1.0 + s / c_sq)
        else:
            s = SpdFactor(marginal_cov).mahalanobis_sq(residual)
            r_sq = 2.0 / (1.0 + s / c_sq)
        return r / r_sq, y, 0.5 * r_sq
    std = r if spec.standardization == "conditional" else marginal_cov
    evaluation = eval_kernel(spec, y, center, SpdFactor(std))
    n_y = rescaled_obs_cov(spec, evaluation, r)
    y_corr = corrected_observation(evaluation, n_y, y)
    return n_y, y_corr, float(evaluation.k_sq.min())


def enkf_perturbed_analysis(
    ensemble: EnsembleState,
    obs: ObservationModel,
    y: np.ndarray,
    spec: WeightKernelSpec | WolfSpec,
    mode: str = "average",
    rng: np.random.Generator | None = None,
    forecast_override: GaussianBelief | None = None,
) -> EnsembleState:
    """Stochastic analysis with perturbed observations.

    ``average`` evaluates the weight once at the empirical forecast mean with
    the empirical innovation covariance; ``per_particle`` evaluates it per
    member at that member's predicted observation with conditional (R)
    standardization, giving each member its own gain and perturbation law.

    ``forecast_override`` freezes the gain and kernel on exact forecast
    moments instead of the empirical ones; with a frozen gain the update is
    mean- and covariance-consistent with the closed-form analysis.
    """
    if rng is None:
        raise ValueError("an explicit random generator is required")
    if mode not in ("average", "per_particle"):
        raise ValueError(f"unknown EnKF mode {mode!r}")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    h = obs.H
    if forecast_override is None:
        p_f = ensemble.cov
        center_mean = h @ ensemble.mean
    else:
        p_f = forecast_override.cov
        center_mean = h @ forecast_override.mean
    hp = h @ p_f
    marginal = symmetrize(hp @ h.T + obs.R)

    members = ensemble.members
    m = ensemble.size
    predicted = h @ members

    if mode == "average":
        eff_r, target, _ = _effective_obs_cov(obs, spec, y, center_mean, marginal)
        gain = SpdFactor(eff_r + hp @ h.T).solve(hp).T
        noise = SpdFactor(eff_r).chol @ rng.standard_normal((obs.d_y, m))
        updated = members - gain @ (predicted + noise - target[:, None])
        return EnsembleState(members=updated)

    if isinstance(spec, WeightKernelSpec) and spec.standardization != "conditional":
        spec = WeightKernelSpec(
            family=spec.family,
            threshold=spec.threshold,
            standardization="conditional",
            block_partition=spec.block_partition,
        )
    updated = np.empty_like(members)
    for i in range(m):
        eff_r, target, _ = _effective_obs_cov(obs, spec, y, predicted[:, i], marginal)
        gain = SpdFactor(eff_r + hp @ h.T).solve(hp).T
        noise = SpdFactor(eff_r).chol @ rng.standard_normal(obs.d_y)
        updated[:, i] = members[:, i] - gain @ (predicted[:, i] + noise - target)
    return EnsembleState(members=updated)


def esrf_analysis(
    ensemble: EnsembleState,
    obs: ObservationModel,
    y: np.ndarray,
    spec: WeightKernelSpec | WolfSpec,
) -> EnsembleState:
    """Deterministic square-root analysis.

    The anomalies are transformed by the unique symmetric PSD square root

        S = [I - (HX)^T [H P H^T + N(y)]^{-1} HX / (M-1)]^{1/2},

    which reproduces the closed-form analysis covariance exactly (for any
    ensemble size) and preserves the zero-sum anomaly property.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    h = obs.H
    m = ensemble.size
    p_f = ensemble.cov
    hp = h @ p_f
    marginal = symmetrize(hp @ h.T + obs.R)
    center = h @ ensemble.mean
    eff_r, target, _ = _effective_obs_cov(obs, spec, y, center, marginal)

    bracket_factor = SpdFactor(eff_r + hp @ h.T)
    gain = bracket_factor.solve(hp).T
    hx = h @ ensemble.anomalies
    core = np.eye(m) - (hx.T @ bracket_factor.solve(hx)) / (m - 1)
    transform = psd_sym_sqrt(core)

    mean_a = ensemble.mean - gain @ (center - target)
    members = mean_a[:, None] + ensemble.anomalies @ transform
    return EnsembleState(members=members)


@dataclass(frozen=True)
class Localization:
    """Cyclic R-localization: observations within ``half_width`` lattice
    sites of the analyzed state index, observation precision tapered by
    exp(-d^2 / L^2) with d the cyclic index distance.

    ``literal_taper`` switches to replacing the observation variances by the
    raw taper values (a transcription found in some write-ups; it trusts
    distant observations more, kept only for comparison).
    """

    half_width: int
    taper_length: float
    literal_taper: bool = False

    def __post_init__(self):
        if self.half_width < 0:
            raise ValueError("half_width must be >= 0")
        if self.taper_length <= 0.0:
            raise ValueError("taper_length must be positive")


@dataclass(frozen=True)
class LetkfConfig:
    """LETKF settings: multiplicative inflation, optional localization and
    an optional explicit weight spec for the anomaly-space analysis.

    With ``kernel`` unset the DSM variant uses an IMQ kernel standardized by
    the observation-anomaly covariance with threshold q^2 equal to the local
    observation count, and the WoLF variant uses the conditionally
    standardized weight with the same default.
    """

    rho: float = 1.0
    localization: Localization | None = None
    kernel: WeightKernelSpec | WolfSpec | None = None
    per_state_window: bool = True

    def __post_init__(self):
        if self.rho < 1.0:
            raise ValueError("inflation rho must be >= 1")


@dataclass(frozen=True)
class AnomalyAnalysis:
    """Analysis solution in the M-dimensional ensemble-anomaly space."""

    cov: np.ndarray        # (M, M) anomaly-space analysis covariance
    mean: np.ndarray       # (M,) anomaly-space analysis mean
    transform: np.ndarray  # (M, M) with transform @ transform.T = (M-1) cov


def anomaly_posterior_cov(gram: np.ndarray, m: int, rho: float = 1.0) -> np.ndarray:
    """Anomaly-space analysis covariance [(M-1)/rho I + gram]^{-1}.

    Multiplicative inflation by rho is equivalent to replacing P^f with
    rho P^f in the anomaly subspace, i.e. dividing the (M-1) identity term.
    """
    if rho < 1.0:
        raise ValueError("inflation rho must be >= 1")
    gram = symmetrize(np.asarray(gram, dtype=float))
    prior_term = (m - 1) / rho * np.eye(gram.shape[0])
    return symmetrize(SpdFactor(prior_term + gram).inverse())


def solve_anomaly_analysis(
    y_anom: np.ndarray,
    ninv: np.ndarray,
    innovation: np.ndarray,
    rho: float = 1.0,
) -> AnomalyAnalysis:
    """Solve the analysis in anomaly space.

    ``y_anom`` is the d_loc x M observation-anomaly matrix, ``ninv`` the
    inverse effective observation covariance and ``innovation`` the
    (possibly gradient-corrected) centered observation.
    """
    m = y_anom.shape[1]
    weighted = ninv @ y_anom
    cov = anomaly_posterior_cov(y_anom.T @ weighted, m, rho)
    mean = cov @ (weighted.T @ innovation)
    transform = psd_sym_sqrt((m - 1) * cov, min_eig_tol=-1e-10)
    return AnomalyAnalysis(cov=cov, mean=mean, transform=transform)


def _window_indices(state_index: int, d_y: int, half_width: int) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic observation window around a state index and the index distances."""
    offsets = np.arange(-half_width, half_width + 1)
    indices = (state_index + offsets) % d_y
    return indices, np.abs(offsets)


def _letkf_weight_update(
    variant: str,
    config: LetkfConfig,
    y: np.ndarray,
    y_mean: np.ndarray,
    y_anom: np.ndarray,
    r_diag_or_matrix: np.ndarray,
    m: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Effective inverse observation covariance and corrected innovation."""
    d_loc = y.shape[0]
    r = np.diag(r_diag_or_matrix) if r_diag_or_matrix.ndim == 1 else r_diag_or_matrix
    innovation = y - y_mean
    if variant == "regular":
        return SpdFactor(r).inverse(), innovation
    if variant == "wolf":
        spec = config.kernel if isinstance(config.kernel, WolfSpec) else WolfSpec()
        c_sq = spec.c_sq if spec.c_sq is not None else float(d_loc)
        r_factor = SpdFactor(r)
        s = r_factor.mahalanobis_sq(innovation)
        if spec.variant == "md":
            r_sq = 1.0 / (1.0 + s / c_sq)
        else:
            sigma_y = symmetrize(y_anom @ y_anom.T / (m - 1) + r)
            s = SpdFactor(sigma_y).mahalanobis_sq(innovation)
            r_sq = 2.0 / (1.0 + s / c_sq)
        return r_sq * r_factor.inverse(), innovation
    if variant == "dsm":
        if isinstance(config.kernel, WeightKernelSpec):
            spec = config.kernel
        else:
            spec = WeightKernelSpec(family=IMQ, standardization=OBS_ANOMALY)
        if spec.threshold is None and spec.family != CONSTANT:
            spec = WeightKernelSpec(
                family=spec.family,
                threshold=default_threshold(d_loc, spec.family),
                standardization=spec.standardization,
                block_partition=spec.block_partition,
            )
        sigma_y = symmetrize(y_anom @ y_anom.T / (m - 1) + r)
        evaluation = eval_kernel(spec, y, y_mean, SpdFactor(sigma_y))
        n_y = rescaled_obs_cov(spec, evaluation, r)
        corrected = corrected_observation(evaluation, n_y, y)
        return SpdFactor(n_y).inverse(), corrected - y_mean
    raise ValueError(f"unknown LETKF variant {variant!r}")


def letkf_analysis(
    ensemble: EnsembleState,
    h: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    r: np.ndarray,
    y: np.ndarray,
    variant: str = "regular",
    config: LetkfConfig | None = None,
) -> EnsembleState:
    """Local ensemble transform analysis (deterministic, no random draws).

    The observation operator is applied per member; the analysis is solved in
    the M-dimensional anomaly space with observation anomalies
    Y_i = h(member_i) - h(mean).  With localization enabled, one local
    analysis per state index runs over the cyclic observation window and
    contributes only that state's row to the output.
    """
    config = config or LetkfConfig()
    y = np.atleast_1d(np.asarray(y, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    if callable(h):
        h_fun = h
    else:
        h_mat = np.atleast_2d(np.asarray(h, dtype=float))
        h_fun = lambda x: h_mat @ x
    m = ensemble.size
    y_mean = np.atleast_1d(h_fun(ensemble.mean))
    y_members = np.atleast_2d(h_fun(ensemble.members))
    y_anom = y_members - y_mean[:, None]

    if config.localization is None or not config.per_state_window:
        ninv, innovation = _letkf_weight_update(
            variant, config, y, y_mean, y_anom, r, m
        )
        solution = solve_anomaly_analysis(y_anom, ninv, innovation, config.rho)
        mean_a = ensemble.mean + ensemble.anomalies @ solution.mean
        members = mean_a[:, None] + ensemble.anomalies @ solution.transform
        return EnsembleState(members=members)

    loc = config.localization
    d_y = y.shape[0]
    r_diag = np.diag(r)
    if np.any(np.abs(r - np.diag(r_diag)) > 1e-12):
        raise ValueError("R-localization requires a diagonal observation covariance")

    members = np.empty_like(ensemble.members)
    x_anom = ensemble.anomalies
    for j in range(ensemble.d_x):
        idx, dist = _window_indices(j, d_y, loc.half_width)
        taper = np.exp(-(dist.astype(float) ** 2) / loc.taper_length**2)
        if loc.literal_taper:
            local_r = taper
        else:
            local_r = r_diag[idx] / taper
        ninv, innovation = _letkf_weight_update(
            variant, config, y[idx], y_mean[idx], y_anom[idx, :], local_r, m
        )
        solution = solve_anomaly_analysis(y_anom[idx, :], ninv, innovation, config.rho)
        row_mean = ensemble.mean[j] + x_anom[j] @ solution.mean
        members[j, :] = row_mean + x_anom[j] @ solution.transform
    return EnsembleState(members=members)
