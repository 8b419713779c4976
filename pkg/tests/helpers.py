"""Shared test oracles: dense-grid quadrature posteriors, the dense
joint-Gaussian smoothing oracle, and finite-difference gradients.

These deliberately avoid the library's update formulas so that agreement is
evidence, not tautology.
"""

from __future__ import annotations

import numpy as np


def grid_posterior_1d(log_unnormalized, lo=-20.0, hi=20.0, n=400_000):
    """Mean and variance of a 1-D density known up to a constant."""
    x = np.linspace(lo, hi, n)
    log_p = log_unnormalized(x)
    log_p = log_p - log_p.max()
    p = np.exp(log_p)
    z = np.trapezoid(p, x)
    mean = np.trapezoid(x * p, x) / z
    var = np.trapezoid((x - mean) ** 2 * p, x) / z
    return mean, var


def grid_posterior_2d(log_unnormalized, lo=-12.0, hi=12.0, n=700):
    """Mean vector and covariance of a 2-D density known up to a constant.

    ``log_unnormalized`` maps an (2, K) array of points to (K,) log-values.
    """
    axis = np.linspace(lo, hi, n)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()])
    log_p = log_unnormalized(pts)
    log_p = log_p - log_p.max()
    p = np.exp(log_p)
    z = p.sum()
    mean = pts @ p / z
    centered = pts - mean[:, None]
    cov = (centered * p) @ centered.T / z
    return mean, cov


def joint_smoother_oracle(a, q, m0, p0, h, observations, noise_covs):
    """Condition the dense joint Gaussian of (x_1, ..., x_n) on observations.

    The state recursion is x_k = a x_{k-1} + N(0, q) started from
    x_0 ~ N(m0, p0); observation k has mean h x_k and noise covariance
    noise_covs[k].  Returns the list of conditioned (mean, cov) marginals of
    x_1..x_n, which is exactly what a smoother reports.
    """
    a = np.atleast_2d(np.asarray(a, float))
    q = np.atleast_2d(np.asarray(q, float))
    h = np.atleast_2d(np.asarray(h, float))
    m0 = np.atleast_1d(np.asarray(m0, float))
    p0 = np.atleast_2d(np.asarray(p0, float))
    n = len(observations)
    d = a.shape[0]
    d_y = h.shape[0]

    # Joint moments of (x_1..x_n) by propagating the prior.
    means = np.zeros((n, d))
    cov = np.zeros((n, d, n, d))
    prev_mean = m0
    prev_cov = p0
    for k in range(n):
        means[k] = a @ prev_mean
        cov[k, :, k, :] = a @ prev_cov @ a.T + q
        for j in range(k):
            cov[k, :, j, :] = a @ cov[k - 1, :, j, :]
            cov[j, :, k, :] = cov[k, :, j, :].T
        prev_mean = means[k]
        prev_cov = cov[k, :, k, :]

    flat_mean = means.reshape(n * d)
    flat_cov = cov.reshape(n * d, n * d)

    # Stack the observation model: y = H_big x + noise, block-diagonal noise.
    h_big = np.zeros((n * d_y, n * d))
    noise_big = np.zeros((n * d_y, n * d_y))
    y_big = np.zeros(n * d_y)
    for k in range(n):
        h_big[k * d_y:(k + 1) * d_y, k * d:(k + 1) * d] = h
        noise_big[k * d_y:(k + 1) * d_y, k * d_y:(k + 1) * d_y] = np.atleast_2d(
            np.asarray(noise_covs[k], float)
        )
        y_big[k * d_y:(k + 1) * d_y] = np.atleast_1d(np.asarray(observations[k], float))

    s = h_big @ flat_cov @ h_big.T + noise_big
    gain = flat_cov @ h_big.T @ np.linalg.inv(s)
    post_mean = flat_mean + gain @ (y_big - h_big @ flat_mean)
    post_cov = flat_cov - gain @ h_big @ flat_cov

    out = []
    for k in range(n):
        sl = slice(k * d, (k + 1) * d)
        out.append((post_mean[sl], post_cov[sl, sl]))
    return out


def central_diff_gradient(fn, y, rel_step=1e-6):
    """Central finite differences with per-coordinate step 1e-6 (1 + |y_i|)."""
    y = np.asarray(y, dtype=float)
    grad = np.zeros_like(y)
    for i in range(y.size):
        step = rel_step * (1.0 + abs(y[i]))
        up = y.copy()
        dn = y.copy()
        up[i] += step
        dn[i] -= step
        grad[i] = (fn(up) - fn(dn)) / (2.0 * step)
    return grad


def random_spd(rng, d, scale=1.0):
    """Random well-conditioned SPD matrix."""
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T + d * np.eye(d))


def fit_loglog_slope(sizes, errors):
    return float(np.polyfit(np.log(np.asarray(sizes, float)),
                            np.log(np.asarray(errors, float)), 1)[0])
