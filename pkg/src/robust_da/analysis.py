"""Closed-form robust analysis steps.

The score-matching (DSM) analysis replaces the observation covariance with
N(y) = R / (2 k^2(y)) and the observation with a gradient-corrected one; the
weighted-likelihood (WoLF) analysis rescales R by 1 / r^2(y) and keeps the
observation unchanged.  Both reduce to the regular Kalman update for their
respective neutral weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import SpdFactor, symmetrize
from .lgss import GaussianBelief, LgssModel, rts_smoother
from .weights import (
    CONDITIONAL,
    MARGINAL,
    WeightEvaluation,
    WeightKernelSpec,
    corrected_observation,
    eval_kernel,
    rescaled_obs_cov,
)

__all__ = [
    "AnalysisResult",
    "WolfSpec",
    "dsm_analysis",
    "wolf_analysis",
    "information_form_update",
    "dsm_rts_smoother",
    "influence_sweep",
    "InfluenceRow",
]


@dataclass(frozen=True)
class AnalysisResult:
    """Posterior belief plus the intermediate robust-update quantities."""

    posterior: GaussianBelief
    kernel_eval: WeightEvaluation
    corrected_obs: np.ndarray
    rescaled_cov: np.ndarray
    gain: np.ndarray


@dataclass(frozen=True)
class WolfSpec:
    """Weighted-likelihood filter weight configuration.

    ``md``: r(y) = (1 + ||y - Hm^f||^2_{R^{-1}} / c^2)^{-1/2}, values in (0, 1]
    so the update can only inflate.  ``sigma_scaled``: the sqrt(2)-rescaled
    variant standardized by the innovation covariance, values in (0, sqrt(2)],
    matching the regular-KF covariance update at zero residual.
    """

    variant: str = "md"
    c_sq: float | None = None

    def __post_init__(self):
        if self.variant not in ("md", "sigma_scaled"):
            raise ValueError(f"unknown WoLF variant {self.variant!r}")
        if self.c_sq is not None and self.c_sq <= 0.0:
            raise ValueError("c_sq must be strictly positive")


def _standardization_cov(mode: str, marginal: np.ndarray, r: np.ndarray) -> np.ndarray:
    if mode == MARGINAL:
        return marginal
    if mode == CONDITIONAL:
        return r
    raise ValueError(
        f"standardization {mode!r} is not available in the closed-form analysis"
    )


def _gain_update(
    forecast: GaussianBelief,
    h: np.ndarray,
    effective_r: np.ndarray,
    target_obs: np.ndarray,
) -> tuple[GaussianBelief, np.ndarray]:
    """Shared gain-form update with observation covariance ``effective_r``."""
    p_f = forecast.cov
    hp = h @ p_f
    bracket = SpdFactor(effective_r + hp @ h.T)
    gain = bracket.solve(hp).T
    cov = p_f - gain @ hp  # ctor symmetrizes
    mean = forecast.mean - gain @ (h @ forecast.mean - target_obs)
    return GaussianBelief(mean=mean, cov=cov), gain


def dsm_analysis(
    model: LgssModel,
    forecast: GaussianBelief,
    y: np.ndarray,
    spec: WeightKernelSpec,
) -> AnalysisResult:
    """Score-matching analysis step.

    Evaluates the kernel at the observation (center H m^f, standardized by
    the innovation covariance in marginal mode), forms N(y) and the corrected
    observation, and applies the adjusted gain
    K = P^f H^T [N(y) + H P^f H^T]^{-1}.
    """
    h, r = model.H, model.R
    y = np.atleast_1d(np.asarray(y, dtype=float))
    marginal = symmetrize(h @ forecast.cov @ h.T + r)
    std_cov = SpdFactor(_standardization_cov(spec.standardization, marginal, r))
    evaluation = eval_kernel(spec, y, h @ forecast.mean, std_cov)
    n_y = rescaled_obs_cov(spec, evaluation, r)
    y_corr = corrected_observation(evaluation, n_y, y)
    posterior, gain = _gain_update(forecast, h, n_y, y_corr)
    return AnalysisResult(
        posterior=posterior,
        kernel_eval=evaluation,
        corrected_obs=y_corr,
        rescaled_cov=n_y,
        gain=gain,
    )


def information_form_update(
    forecast: GaussianBelief,
    h: np.ndarray,
    rescaled_cov: np.ndarray,
    corrected_obs: np.ndarray,
) -> GaussianBelief:
    """Information-form route to the same posterior.

    P^a = [(P^f)^{-1} + H^T N^{-1}(y) H]^{-1} and
    m^a = m^f - P^a H^T N^{-1}(y) (H m^f - y_corr).  Kept as an independent
    expression so the gain-form update can be cross-checked against it.
    """
    n_inv = SpdFactor(rescaled_cov).inverse()
    precision = forecast.precision + h.T @ n_inv @ h
    p_a = symmetrize(SpdFactor(precision).inverse())
    mean = forecast.mean - p_a @ (h.T @ (n_inv @ (h @ forecast.mean - corrected_obs)))
    return GaussianBelief(mean=mean, cov=p_a)


def wolf_analysis(
    model: LgssModel,
    forecast: GaussianBelief,
    y: np.ndarray,
    spec: WolfSpec,
) -> AnalysisResult:
    """Weighted-likelihood analysis step.

    Replaces R by R / r^2(y) inside the regular gain (the effective
    observation covariance; cross-checked against the information-form
    precision update J^a = J^f + r^2 H^T R^{-1} H) and assimilates the raw
    observation.  The result is reported through the same container as the
    score-matching step with the effective squared weight r^2 / 2, which
    makes the shared rescaled-covariance relation N = R / (2 k^2) hold
    verbatim.
    """
    h, r = model.H, model.R
    y = np.atleast_1d(np.asarray(y, dtype=float))
    c_sq = spec.c_sq if spec.c_sq is not None else float(model.d_y)
    residual = y - h @ forecast.mean
    if spec.variant == "md":
        s = model.observation.r_factor.mahalanobis_sq(residual)
        r_sq = 1.0 / (1.0 + s / c_sq)
    else:
        marginal = SpdFactor(symmetrize(h @ forecast.cov @ h.T + r))
        s = marginal.mahalanobis_sq(residual)
        r_sq = 2.0 / (1.0 + s / c_sq)
    r_tilde = r / r_sq
    posterior, gain = _gain_update(forecast, h, r_tilde, y)
    d_y = model.d_y
    evaluation = WeightEvaluation(
        k_sq=np.array([0.5 * r_sq]),
        grad_diag=np.zeros(d_y),
        full_grads=np.zeros((1, d_y)),
        partition=((0, d_y),),
    )
    return AnalysisResult(
        posterior=posterior,
        kernel_eval=evaluation,
        corrected_obs=y,
        rescaled_cov=r_tilde,
        gain=gain,
    )


def dsm_rts_smoother(
    model: LgssModel,
    forecasts,
    analyses,
    transitions=None,
) -> list[GaussianBelief]:
    """Backward smoother over score-matching filter output.

    The backward recursion is identical to the regular RTS smoother; the
    robust adjustment enters only through the forward-pass analysis
    parameters, which are consumed as-is (no re-weighting backwards).
    """
    beliefs = [a.posterior if isinstance(a, AnalysisResult) else a for a in analyses]
    return rts_smoother(model, forecasts, beliefs, transitions=transitions)


@dataclass(frozen=True)
class InfluenceRow:
    method: str
    magnitude: float
    mean_shift: float
    cov_trace: float


def influence_sweep(
    model: LgssModel,
    forecast: GaussianBelief,
    spec_dsm: WeightKernelSpec,
    spec_wolf: WolfSpec,
    magnitudes,
    direction: np.ndarray | None = None,
) -> list[InfluenceRow]:
    """Empirical posterior-influence sweep over outlier magnitudes.

    Places the observation at H m^f + magnitude * u for a fixed unit vector
    u (default: the leading eigenvector of the innovation covariance) and
    records the posterior-mean displacement and covariance trace for the
    regular, score-matching and weighted-likelihood updates.  A bounded
    displacement plateau as the magnitude grows is the operational
    robustness signature; the regular gain is constant in y, so its
    displacement grows linearly without bound.
    """
    from .lgss import kf_analysis  # local import to avoid cycle at module load

    h = model.H
    center = h @ forecast.mean
    marginal = symmetrize(h @ forecast.cov @ h.T + model.R)
    if direction is None:
        eigvals, eigvecs = np.linalg.eigh(marginal)
        direction = eigvecs[:, np.argmax(eigvals)]
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)

    rows: list[InfluenceRow] = []
    for magnitude in magnitudes:
        y0 = center + float(magnitude) * direction
        posteriors = {
            "kf": kf_analysis(model, forecast, y0),
            "dsm": dsm_analysis(model, forecast, y0, spec_dsm).posterior,
            "wolf": wolf_analysis(model, forecast, y0, spec_wolf).posterior,
        }
        for method, post in posteriors.items():
            rows.append(
                InfluenceRow(
                    method=method,
                    magnitude=float(magnitude),
                    mean_shift=float(np.linalg.norm(post.mean - forecast.mean)),
                    cov_trace=float(np.trace(post.cov)),
                )
            )
    return rows
