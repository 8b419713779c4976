"""Positive-definite matrix utilities shared by the filter implementations.

Covariance recursions accumulate asymmetry and tiny negative curvature over
long runs, so every factorization here symmetrizes its input and repairs
borderline matrices with an escalating trace-scaled jitter before giving up.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = ["SpdFactor", "symmetrize", "psd_sym_sqrt"]

# Jitter schedule for Cholesky repair: base scale relative to mean diagonal,
# escalated tenfold per retry.
_JITTER_BASE = 1e-12
_JITTER_RETRIES = 3


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return the symmetric part (a + a.T) / 2."""
    return 0.5 * (a + a.T)


def psd_sym_sqrt(a: np.ndarray, min_eig_tol: float = -1e-8) -> np.ndarray:
    """Unique symmetric PSD square root of a symmetric PSD matrix.

    Eigenvalues in [min_eig_tol, 0) are clamped to zero; anything below the
    tolerance signals a genuinely indefinite matrix and raises.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    eigvals, eigvecs = np.linalg.eigh(a)
    if eigvals.min(initial=0.0) < min_eig_tol:
        raise np.linalg.LinAlgError(
            f"matrix is not PSD: min eigenvalue {eigvals.min():.3e} "
            f"below tolerance {min_eig_tol:.1e}"
        )
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


class SpdFactor:
    """Cholesky factor of an SPD matrix with a cached symmetric square root.

    Wraps the lower-triangular factor used for quadratic forms and solves,
    plus an eigendecomposition-based symmetric root computed on demand (the
    whitening projection for block kernels needs the basis-independent root,
    not the triangular one).
    """

    __slots__ = ("matrix", "chol", "_sym_sqrt", "_inv_sym_sqrt")

    def __init__(self, matrix: np.ndarray):
        a = symmetrize(np.asarray(matrix, dtype=float))
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        d = a.shape[0]
        lower = None
        jitter = None
        for attempt in range(_JITTER_RETRIES + 1):
            try:
                lower = np.linalg.cholesky(a)
                break
            except np.linalg.LinAlgError:
                if attempt == _JITTER_RETRIES:
                    raise np.linalg.LinAlgError(
                        "matrix is not positive definite "
                        f"(Cholesky failed after {_JITTER_RETRIES} jitter retries)"
                    )
                if jitter is None:
                    jitter = _JITTER_BASE * np.trace(a) / d
                a = a + jitter * np.eye(d)
                jitter *= 10.0
        self.matrix = a
        self.chol = lower
        self._sym_sqrt = None
        self._inv_sym_sqrt = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve A x = b via the Cholesky factor."""
        return cho_solve((self.chol, True), b, check_finite=False)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))

    def mahalanobis_sq(self, residual: np.ndarray) -> float:
        """Quadratic form r^T A^{-1} r computed by triangular solve."""
        r = np.asarray(residual, dtype=float)
        if r.shape != (self.dim,):
            raise ValueError(
                f"residual has shape {r.shape}, expected ({self.dim},)"
            )
        z = solve_triangular(self.chol, r, lower=True, check_finite=False)
        return float(z @ z)

    def _eig_roots(self) -> None:
        eigvals, eigvecs = np.linalg.eigh(self.matrix)
        eigvals = np.clip(eigvals, 0.0, None)
        root = np.sqrt(eigvals)
        self._sym_sqrt = (eigvecs * root) @ eigvecs.T
        with np.errstate(divide="ignore"):
            inv_root = np.where(root > 0.0, 1.0 / root, 0.0)
        self._inv_sym_sqrt = (eigvecs * inv_root) @ eigvecs.T

    @property
    def sym_sqrt(self) -> np.ndarray:
        """Symmetric square root S with S @ S = matrix."""
        if self._sym_sqrt is None:
            self._eig_roots()
        return self._sym_sqrt

    @property
    def inv_sym_sqrt(self) -> np.ndarray:
        """Symmetric inverse square root T with T @ matrix @ T = identity."""
        if self._inv_sym_sqrt is None:
            self._eig_roots()
        return self._inv_sym_sqrt

    def __repr__(self) -> str:  # pragma: no cover
        return f"SpdFactor(dim={self.dim})"
