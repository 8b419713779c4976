"""Linear Gaussian state-space core: beliefs, the model, the Kalman filter
and the Rauch-Tung-Striebel smoother.

Conventions follow the usual discrete-time system

    x_n = A x_{n-1} + Q^{1/2} w_n,      y_n = H x_n + R^{1/2} v_n,

with Gaussian beliefs carried in covariance form (mean, cov) and
information-form accessors (precision, potential) derived on demand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._linalg import SpdFactor, symmetrize

__all__ = [
    "GaussianBelief",
    "LgssModel",
    "ObservationModel",
    "kf_forecast",
    "kf_analysis",
    "rts_smoother",
    "mahalanobis_sq",
]

BlockPartition = tuple[tuple[int, int], ...]


def _as_vector(x, d: int | None = None) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.ndim == 1 and x.dtype == np.float64:
        v = x
    else:
        v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise ValueError(f"expected a vector of length {d}, got {v.shape[0]}")
    return v


def _as_matrix(a, shape: tuple[int, int] | None = None) -> np.ndarray:
    if isinstance(a, np.ndarray) and a.ndim == 2 and a.dtype == np.float64:
        m = a
    else:
        m = np.atleast_2d(np.asarray(a, dtype=float))
    if shape is not None and m.shape != shape:
        raise ValueError(f"expected a matrix of shape {shape}, got {m.shape}")
    return m


def normalize_partition(partition, d: int) -> BlockPartition:
    """Validate that contiguous (start, stop) ranges disjointly cover 0..d."""
    blocks = tuple((int(a), int(b)) for a, b in partition)
    cursor = 0
    for start, stop in blocks:
        if start != cursor or stop <= start:
            raise ValueError(
                f"block partition {blocks} is not a disjoint contiguous cover of 0..{d}"
            )
        cursor = stop
    if cursor != d:
        raise ValueError(f"block partition covers 0..{cursor}, expected 0..{d}")
    return blocks


@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian distribution in covariance form.

    The covariance is symmetrized on construction; positive definiteness is
    enforced by the Cholesky factorization (with jitter repair) the first
    time a factor-based quantity is requested.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean)
        cov = symmetrize(_as_matrix(self.cov))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(
                f"covariance shape {cov.shape} does not match mean length {mean.shape[0]}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def factor(self) -> SpdFactor:
        cached = self.__dict__.get("_factor")
        if cached is None:
            cached = SpdFactor(self.cov)
            object.__setattr__(self, "_factor", cached)
        return cached

    @property
    def precision(self) -> np.ndarray:
        """Information matrix J = cov^{-1}."""
        return symmetrize(self.factor.inverse())

    @property
    def potential(self) -> np.ndarray:
        """Information vector theta = J @ mean."""
        return self.factor.solve(self.mean)

    @classmethod
    def from_information(cls, potential, precision) -> "GaussianBelief":
        j = SpdFactor(_as_matrix(precision))
        cov = symmetrize(j.inverse())
        mean = j.solve(_as_vector(potential))
        return cls(mean=mean, cov=cov)


@dataclass(frozen=True)
class ObservationModel:
    """Observation operator H with noise covariance R (optionally blocked)."""

    H: np.ndarray
    R: np.ndarray
    block_partition: BlockPartition | None = None

    def __post_init__(self):
        h = _as_matrix(self.H)
        r = symmetrize(_as_matrix(self.R))
        if r.shape != (h.shape[0], h.shape[0]):
            raise ValueError(
                f"R shape {r.shape} does not match observation dimension {h.shape[0]}"
            )
        np.linalg.cholesky(r)  # R must be genuinely SPD, no repair
        partition = self.block_partition
        if partition is not None:
            partition = normalize_partition(partition, h.shape[0])
            _check_block_diagonal(r, partition)
        object.__setattr__(self, "H", h)
        object.__setattr__(self, "R", r)
        object.__setattr__(self, "block_partition", partition)

    @property
    def d_y(self) -> int:
        return self.H.shape[0]

    @property
    def d_x(self) -> int:
        return self.H.shape[1]

    @property
    def r_factor(self) -> SpdFactor:
        cached = self.__dict__.get("_r_factor")
        if cached is None:
            cached = SpdFactor(self.R)
            object.__setattr__(self, "_r_factor", cached)
        return cached


def _check_block_diagonal(r: np.ndarray, partition: BlockPartition, tol: float = 1e-12):
    mask = np.ones_like(r, dtype=bool)
    for start, stop in partition:
        mask[start:stop, start:stop] = False
    off = np.abs(r[mask])
    if off.size and off.max() > tol:
        raise ValueError(
            f"R is not block-diagonal w.r.t. the partition (max off-block entry {off.max():.3e})"
        )


@dataclass(frozen=True)
class LgssModel:
    """Time-invariant linear Gaussian state-space system.

    Time-varying systems are handled by the filter loops through a callback
    supplying per-step (A, Q, H, R); this container stores the constant case
    which covers every benchmark model.
    """

    A: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    prior: GaussianBelief
    block_partition: BlockPartition | None = None

    def __post_init__(self):
        a = _as_matrix(self.A)
        d_x = a.shape[0]
        if a.shape != (d_x, d_x):
            raise ValueError(f"A must be square, got {a.shape}")
        q = symmetrize(_as_matrix(self.Q, (d_x, d_x)))
        # Q is allowed to be PSD (Q = 0 is legitimate deterministic dynamics);
        # nothing in the recursions inverts it.
        q_eigs = np.linalg.eigvalsh(q)
        if q_eigs.min() < -1e-10 * max(1.0, abs(q_eigs.max())):
            raise ValueError("Q must be positive semi-definite")
        h = _as_matrix(self.H)
        if h.shape[1] != d_x:
            raise ValueError(f"H has {h.shape[1]} columns, expected {d_x}")
        obs = ObservationModel(H=h, R=self.R, block_partition=self.block_partition)
        if self.prior.dim != d_x:
            raise ValueError(
                f"prior dimension {self.prior.dim} does not match state dimension {d_x}"
            )
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "Q", q)
        object.__setattr__(self, "H", obs.H)
        object.__setattr__(self, "R", obs.R)
        object.__setattr__(self, "block_partition", obs.block_partition)
        object.__setattr__(self, "_obs", obs)

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_y(self) -> int:
        return self.H.shape[0]

    @property
    def observation(self) -> ObservationModel:
        return self.__dict__["_obs"]


def mahalanobis_sq(residual: np.ndarray, cov: SpdFactor) -> float:
    """Squared Mahalanobis norm r^T cov^{-1} r (triangular solve, >= 0)."""
    return cov.mahalanobis_sq(residual)


def kf_forecast(model: LgssModel, analysis: GaussianBelief) -> GaussianBelief:
    """Forecast step: (m, P) -> (A m, A P A^T + Q)."""
    if analysis.dim != model.d_x:
        raise ValueError(
            f"belief dimension {analysis.dim} does not match state dimension {model.d_x}"
        )
    mean = model.A @ analysis.mean
    cov = model.A @ analysis.cov @ model.A.T + model.Q  # ctor symmetrizes
    return GaussianBelief(mean=mean, cov=cov)


def kf_analysis(model: LgssModel, forecast: GaussianBelief, y: np.ndarray) -> GaussianBelief:
    """Regular Kalman analysis step.

    Gain K = P^f H^T [R + H P^f H^T]^{-1}, then
    P^a = P^f - K H P^f and m^a = m^f - K (H m^f - y).

    Raises np.linalg.LinAlgError when the innovation covariance
    R + H P^f H^T cannot be factorized.
    """
    h, r = model.H, model.R
    y = _as_vector(y, model.d_y)
    if forecast.dim != model.d_x:
        raise ValueError(
            f"forecast dimension {forecast.dim} does not match state dimension {model.d_x}"
        )
    p_f = forecast.cov
    hp = h @ p_f
    innovation_cov = SpdFactor(r + hp @ h.T)
    gain = innovation_cov.solve(hp).T
    cov = p_f - gain @ hp  # ctor symmetrizes
    mean = forecast.mean - gain @ (h @ forecast.mean - y)
    return GaussianBelief(mean=mean, cov=cov)


def rts_smoother(
    model: LgssModel,
    forecasts: Sequence[GaussianBelief],
    analyses: Sequence[GaussianBelief],
    transitions: Sequence[np.ndarray] | None = None,
) -> list[GaussianBelief]:
    """Backward Rauch-Tung-Striebel recursion.

    ``forecasts[k + 1]`` must be the forecast produced from ``analyses[k]``.
    The recursion is initialized with the final analysis and runs

        G_k   = P^a_k A^T (P^f_{k+1})^{-1}
        P^s_k = P^a_k - G_k [P^f_{k+1} - P^s_{k+1}] G_k^T
        m^s_k = m^a_k - G_k (m^f_{k+1} - m^s_{k+1})

    where A is the transition that produced forecast k+1 (``transitions[k + 1]``
    for a time-varying run, ``model.A`` otherwise).
    """
    n = len(analyses)
    if len(forecasts) != n:
        raise ValueError("forecasts and analyses must have equal length")
    if n == 0:
        return []
    smoothed = [None] * n
    smoothed[-1] = analyses[-1]
    for k in range(n - 2, -1, -1):
        a_next = model.A if transitions is None else _as_matrix(transitions[k + 1])
        f_next = forecasts[k + 1]
        s_next = smoothed[k + 1]
        p_a = analyses[k].cov
        # G = P^a A^T (P^f)^{-1}, computed as solve(P^f, A P^a)^T
        gain = f_next.factor.solve(a_next @ p_a).T
        cov = symmetrize(p_a - gain @ (f_next.cov - s_next.cov) @ gain.T)
        mean = analyses[k].mean - gain @ (f_next.mean - s_next.mean)
        smoothed[k] = GaussianBelief(mean=mean, cov=cov)
    return smoothed
