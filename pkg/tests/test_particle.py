import numpy as np
import pytest

from robust_da import (
    GaussianBelief,
    LgssModel,
    ParticleCloud,
    PotentialSpec,
    dsm_analysis,
    dsm_log_potential,
    pf_step,
)
from robust_da.particle import dsm_log_potential_batch
from robust_da.weights import CONSTANT, WeightKernelSpec
from helpers import fit_loglog_slope


def scalar_model(r=1.0):
    return LgssModel(
        A=[[0.7]], Q=[[1.3]], H=[[1.0]], R=[[r]],
        prior=GaussianBelief(mean=[0.0], cov=[[1.0]]),
    )


def lgss_dynamics(members, rng):
    return 0.7 * members + np.sqrt(1.3) * rng.standard_normal(members.shape)


# ---------------------------------------------------------------------------
# Potential


def test_potential_at_zero_residual():
    for d_y in (1, 2, 5):
        y = np.zeros(d_y)
        value = dsm_log_potential(y, y, np.eye(d_y), q_sq=float(d_y))
        assert value == pytest.approx(2.0 * d_y, rel=1e-12)


def test_potential_bounded_at_extreme_residual():
    # Scalar, q^2 = 1, R = 1: the loss saturates at q^2, so the log-potential
    # approaches -1; the quadratic term k^2 s approaches q^2.
    value = dsm_log_potential(np.array([1e6]), np.array([0.0]), np.eye(1), q_sq=1.0)
    assert value == pytest.approx(-1.0, abs=1e-5)
    s = 1e12
    k_sq = 1.0 / (1.0 + s)
    assert k_sq * s == pytest.approx(1.0, rel=1e-6)  # first loss term -> q^2


def test_potential_finite_positive_on_random_sweep():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((3, 10_000)) * rng.uniform(0.1, 1e4, size=(1, 10_000))
    h_of_x = rng.standard_normal((3, 10_000))
    log_g = dsm_log_potential_batch(y[:, 0], h_of_x, np.eye(3), q_sq=3.0)
    assert np.all(np.isfinite(log_g))
    # G = exp(log G) > 0 and bounded above by exp(2 d_Y).
    assert np.all(log_g <= 2.0 * 3 + 1e-12)


def test_potential_saturates_over_residual_sweep():
    q_sq = 2.0
    residuals = np.linspace(0.0, 1e3, 1_000_000)
    log_g = dsm_log_potential_batch(
        np.array([0.0]), residuals[None, :], np.eye(1), q_sq=q_sq
    )
    assert np.all(np.isfinite(log_g))
    assert np.abs(log_g).max() <= 2.0 + 1e-9  # |log G| <= max(2 d_Y, q^2)
    # Saturation: far out, the value is within 1% of the limit -q^2.
    tail = log_g[residuals > 500.0]
    assert np.all(np.abs(tail + q_sq) <= 0.01 * q_sq)


def test_potential_requires_positive_threshold():
    with pytest.raises(ValueError):
        dsm_log_potential(np.zeros(1), np.zeros(1), np.eye(1), q_sq=0.0)


# ---------------------------------------------------------------------------
# pf_step


def test_constant_potential_leaves_weights_unchanged():
    rng = np.random.default_rng(1)
    particles = rng.standard_normal((1, 50))
    logw = rng.standard_normal(50)
    cloud = ParticleCloud(particles=particles, log_weights=logw)

    def frozen_dynamics(members, rng):
        return members

    # A constant observation map makes the potential identical across
    # particles, so normalized weights are unchanged.
    h_const = np.zeros((1, 1))
    out = pf_step(
        cloud, frozen_dynamics, np.array([0.3]), h_const, np.eye(1),
        PotentialSpec(family="imq", q_sq=1.0), rng, resample_threshold=0.0,
    )
    assert np.allclose(out.log_weights, cloud.log_weights, atol=1e-12)


def test_pf_matches_closed_form_with_constant_tuning():
    model = scalar_model()
    y = np.array([1.5])
    spec = WeightKernelSpec(family=CONSTANT)
    forecast = GaussianBelief(mean=[0.0], cov=[[0.49 + 1.3]])
    target = dsm_analysis(model, forecast, y, spec).posterior

    rng = np.random.default_rng(2)
    m = 100_000
    particles = rng.standard_normal((1, m))  # prior N(0, 1)
    cloud = ParticleCloud.uniform(particles)
    out = pf_step(
        cloud, lgss_dynamics, y, model.H, model.R,
        PotentialSpec(family="constant"), rng, resample_threshold=0.0,
    )
    se = np.sqrt(target.cov[0, 0] / out.ess)
    assert abs(out.weighted_mean()[0] - target.mean[0]) <= 3.0 * se


def test_pf_bit_reproducible():
    model = scalar_model()
    y = np.array([0.7])
    clouds = []
    for _ in range(2):
        rng = np.random.default_rng(77)
        cloud = ParticleCloud.uniform(np.random.default_rng(5).standard_normal((1, 64)))
        out = pf_step(
            cloud, lgss_dynamics, y, model.H, model.R,
            PotentialSpec(family="imq", q_sq=1.0), rng, resample_threshold=0.9,
        )
        clouds.append(out)
    assert np.array_equal(clouds[0].particles, clouds[1].particles)
    assert np.array_equal(clouds[0].log_weights, clouds[1].log_weights)


def test_ess_bounds_and_resampling_reset():
    rng = np.random.default_rng(3)
    particles = rng.standard_normal((1, 100))
    logw = np.full(100, -np.log(100))
    logw[0] = 5.0  # concentrate weight
    cloud = ParticleCloud(particles=particles, log_weights=logw)
    assert 1.0 <= cloud.ess <= 100.0

    def frozen(members, rng):
        return members

    out = pf_step(
        cloud, frozen, np.array([0.0]), np.zeros((1, 1)), np.eye(1),
        PotentialSpec(family="imq", q_sq=1.0), rng, resample_threshold=0.99,
    )
    assert np.allclose(out.weights, 1.0 / 100)


def test_resampling_preserves_weighted_mean_on_average():
    rng = np.random.default_rng(4)
    particles = rng.standard_normal((1, 400))
    logw = -0.5 * (particles[0] - 1.0) ** 2
    cloud = ParticleCloud(particles=particles, log_weights=logw)
    target = cloud.weighted_mean()[0]

    means = []
    for _ in range(200):
        idx = rng.choice(400, size=400, p=cloud.weights)
        means.append(particles[0, idx].mean())
    means = np.asarray(means)
    se = means.std(ddof=1) / np.sqrt(200)
    assert abs(means.mean() - target) <= 3.0 * se


def test_pf_monte_carlo_rate_light():
    model = scalar_model()
    y = np.array([1.0])
    forecast = GaussianBelief(mean=[0.0], cov=[[0.49 + 1.3]])
    target = dsm_analysis(model, forecast, y, WeightKernelSpec(family=CONSTANT)).posterior
    rng = np.random.default_rng(5)
    sizes = [100, 1000, 10_000]
    errors = []
    for m in sizes:
        errs = []
        for _ in range(30):
            cloud = ParticleCloud.uniform(rng.standard_normal((1, m)))
            out = pf_step(
                cloud, lgss_dynamics, y, model.H, model.R,
                PotentialSpec(family="constant"), rng, resample_threshold=0.0,
            )
            errs.append(abs(out.weighted_mean()[0] - target.mean[0]))
        errors.append(np.mean(errs))
    slope = fit_loglog_slope(sizes, errors)
    assert abs(slope + 0.5) < 0.2


def test_systematic_resampling_available():
    rng = np.random.default_rng(6)
    cloud = ParticleCloud.uniform(rng.standard_normal((1, 32)))

    def frozen(members, rng):
        return members

    out = pf_step(
        cloud, frozen, np.array([4.0]), np.eye(1), np.eye(1),
        PotentialSpec(family="imq", q_sq=1.0), rng,
        resample_threshold=1.1, resampling="systematic",
    )
    assert np.allclose(out.weights, 1.0 / 32)
