import math

import numpy as np
import pytest

from robust_da import SpdFactor
from robust_da.weights import (
    CONSTANT,
    IMQ,
    SQEXP,
    WeightKernelSpec,
    corrected_observation,
    default_threshold,
    eval_kernel,
    expected_weight_mc,
    jensen_bounds,
    jensen_upper_empirical,
    rescaled_obs_cov,
    tune_threshold,
)
from helpers import central_diff_gradient, random_spd


def test_zero_residual_gives_unit_weight_and_zero_gradient():
    rng = np.random.default_rng(0)
    cov = SpdFactor(random_spd(rng, 4))
    y = rng.standard_normal(4)
    for family in (IMQ, SQEXP):
        for partition in (None, ((0, 2), (2, 4))):
            spec = WeightKernelSpec(family=family, threshold=2.0, block_partition=partition)
            ev = eval_kernel(spec, y, y, cov)
            assert np.allclose(ev.k_sq, 1.0)
            assert np.allclose(ev.grad_diag, 0.0)
            assert np.allclose(ev.full_grads, 0.0)


def test_scalar_imq_half_weight():
    spec = WeightKernelSpec(family=IMQ, threshold=1.0)
    ev = eval_kernel(spec, np.array([1.0]), np.array([0.0]), SpdFactor([[1.0]]))
    assert ev.k_sq[0] == pytest.approx(0.5, rel=1e-14)


def test_constant_family_is_exact_half():
    spec = WeightKernelSpec(family=CONSTANT)
    ev = eval_kernel(spec, np.array([3.0, 1.0]), np.zeros(2), SpdFactor(np.eye(2)))
    assert np.all(ev.k_sq == 0.5)
    assert np.all(ev.grad_diag == 0.0)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(100):
        d_y = int(rng.integers(1, 7))
        cov = SpdFactor(random_spd(rng, d_y))
        center = rng.standard_normal(d_y)
        y = center + rng.standard_normal(d_y) * rng.uniform(0.5, 3.0)
        family = (IMQ, SQEXP)[int(rng.integers(2))]
        if d_y >= 2 and rng.random() < 0.5:
            split = int(rng.integers(1, d_y))
            partition = ((0, split), (split, d_y))
        else:
            partition = None
        spec = WeightKernelSpec(
            family=family,
            threshold=float(rng.uniform(0.5, 5.0)),
            block_partition=partition,
        )
        ev = eval_kernel(spec, y, center, cov)
        for b in range(ev.n_blocks):
            fd = central_diff_gradient(
                lambda yy: eval_kernel(spec, yy, center, cov).k_sq[b], y
            )
            scale = max(np.linalg.norm(fd), 1e-8)
            assert np.linalg.norm(ev.full_grads[b] - fd) / scale <= 1e-5
        # grad_diag is the blockwise diagonal of the full gradients.
        for b, (start, stop) in enumerate(ev.partition):
            assert np.array_equal(ev.grad_diag[start:stop], ev.full_grads[b, start:stop])
        checked += 1
    assert checked == 100


def test_kernel_bounded_on_random_sweep():
    rng = np.random.default_rng(2)
    cov = SpdFactor(random_spd(rng, 3))
    draws = rng.standard_normal((5_000, 3)) * rng.uniform(0.1, 100.0, size=(5_000, 1))
    for family in (IMQ, SQEXP):
        spec = WeightKernelSpec(family=family, threshold=1.5)
        values = np.array(
            [eval_kernel(spec, y, np.zeros(3), cov).k_sq[0] for y in draws]
        )
        assert np.all(values > 0.0)
        assert np.all(values <= 1.0)


def test_kernel_strictly_decreasing_in_mahalanobis_square():
    cov = SpdFactor(np.eye(1))
    for family in (IMQ, SQEXP):
        spec = WeightKernelSpec(family=family, threshold=2.0)
        values = [
            eval_kernel(spec, np.array([r]), np.zeros(1), cov).k_sq[0]
            for r in np.linspace(0.0, 10.0, 50)
        ]
        assert np.all(np.diff(values) < 0.0)


def test_nonpositive_threshold_rejected():
    with pytest.raises(ValueError):
        WeightKernelSpec(family=IMQ, threshold=0.0).thresholds_for(1)
    with pytest.raises(ValueError):
        WeightKernelSpec(family=IMQ, threshold=-1.0).thresholds_for(1)


# ---------------------------------------------------------------------------
# rescaled_obs_cov / corrected_observation


def test_rescaled_cov_constant_recovers_r():
    rng = np.random.default_rng(3)
    r = random_spd(rng, 3)
    spec = WeightKernelSpec(family=CONSTANT)
    ev = eval_kernel(spec, rng.standard_normal(3), np.zeros(3), SpdFactor(np.eye(3)))
    assert np.allclose(rescaled_obs_cov(spec, ev, r), r)


def test_rescaled_cov_examples():
    spec = WeightKernelSpec(family=IMQ, threshold=1.0)
    cov = SpdFactor([[1.0]])
    ev_max = eval_kernel(spec, np.array([0.0]), np.zeros(1), cov)  # k^2 = 1
    assert rescaled_obs_cov(spec, ev_max, np.array([[1.0]]))[0, 0] == pytest.approx(0.5)
    ev_half = eval_kernel(spec, np.array([1.0]), np.zeros(1), cov)  # k^2 = 1/2
    assert rescaled_obs_cov(spec, ev_half, np.array([[3.0]]))[0, 0] == pytest.approx(3.0)


def test_rescaled_cov_block_assembly():
    rng = np.random.default_rng(4)
    r = np.zeros((3, 3))
    r[0:2, 0:2] = random_spd(rng, 2)
    r[2, 2] = 2.0
    spec = WeightKernelSpec(family=IMQ, threshold=[1.0, 4.0], block_partition=((0, 2), (2, 3)))
    ev = eval_kernel(spec, rng.standard_normal(3), np.zeros(3), SpdFactor(random_spd(rng, 3)))
    n = rescaled_obs_cov(spec, ev, r)
    assert np.allclose(n[0:2, 0:2], r[0:2, 0:2] / (2 * ev.k_sq[0]))
    assert n[2, 2] == pytest.approx(r[2, 2] / (2 * ev.k_sq[1]))
    assert n[0, 2] == 0.0


def test_corrected_observation_identity_cases():
    rng = np.random.default_rng(5)
    y = rng.standard_normal(2)
    cov = SpdFactor(np.eye(2))
    # Zero residual: gradient vanishes.
    spec = WeightKernelSpec(family=IMQ, threshold=1.0)
    ev = eval_kernel(spec, y, y, cov)
    n = rescaled_obs_cov(spec, ev, np.eye(2))
    assert np.allclose(corrected_observation(ev, n, y), y)
    # Constant family: gradient identically zero.
    spec_const = WeightKernelSpec(family=CONSTANT)
    ev_const = eval_kernel(spec_const, y, np.zeros(2), cov)
    n_const = rescaled_obs_cov(spec_const, ev_const, np.eye(2))
    assert np.array_equal(corrected_observation(ev_const, n_const, y), y)


def test_corrected_observation_hand_example():
    # Scalar IMQ, q^2 = 1, Sigma = 1, R = 1, center 0, y = 1:
    # k^2 = 1/2, grad = -1/2, N = 1, corrected = 1 - 2*1*(-1/2) = 2.
    spec = WeightKernelSpec(family=IMQ, threshold=1.0)
    ev = eval_kernel(spec, np.array([1.0]), np.zeros(1), SpdFactor([[1.0]]))
    assert ev.k_sq[0] == pytest.approx(0.5)
    assert ev.full_grads[0, 0] == pytest.approx(-0.5, rel=1e-12)
    n = rescaled_obs_cov(spec, ev, np.array([[1.0]]))
    assert n[0, 0] == pytest.approx(1.0)
    assert corrected_observation(ev, n, np.array([1.0]))[0] == pytest.approx(2.0, rel=1e-12)


# ---------------------------------------------------------------------------
# Tuning utilities


def test_jensen_bounds_table_values():
    lower, upper, mad = jensen_bounds(10, 10.0, IMQ)
    assert lower == pytest.approx(1.0)
    assert upper == pytest.approx(1.0 + math.sqrt(8.0) * math.sqrt(10.0) / 10.0, rel=1e-12)
    assert upper == pytest.approx(1.894, abs=5e-4)
    assert mad == pytest.approx(1.789, abs=5e-4)
    _, upper_1000, _ = jensen_bounds(1000, 1000.0, IMQ)
    assert 1.0 < upper_1000 < 1.1


def test_jensen_bounds_infinite_threshold_limit():
    lower, upper, mad = jensen_bounds(5, 1e12, IMQ)
    assert lower == pytest.approx(2.0, abs=1e-8)
    assert upper == pytest.approx(2.0, abs=1e-5)
    assert mad == pytest.approx(0.0, abs=1e-5)


def test_jensen_empirical_upper_is_tighter():
    assert jensen_upper_empirical(10, 10.0) < jensen_bounds(10, 10.0, IMQ)[1]


def test_expected_weight_reference_values():
    # Exact value of E[2/(1 + Xi)], Xi ~ chi2(1), is about 1.3113.
    est = expected_weight_mc(1, 1.0, IMQ, n_samples=400_000, seed=11)
    assert est == pytest.approx(1.3113, abs=0.01)
    est_tuned = expected_weight_mc(1, 0.375, IMQ, n_samples=400_000, seed=11)
    assert est_tuned == pytest.approx(1.0, abs=0.01)


def test_expected_weight_within_jensen_sandwich():
    for d_y in (1, 10, 100, 1000):
        lower, upper, _ = jensen_bounds(d_y, float(d_y), IMQ)
        est = expected_weight_mc(d_y, float(d_y), IMQ, n_samples=200_000, seed=d_y)
        margin = 3.0 * 2.0 / math.sqrt(200_000)
        assert lower - margin <= est <= upper + margin


def test_high_dimensional_unbiasedness():
    gaps = [
        abs(expected_weight_mc(d, float(d), IMQ, n_samples=400_000, seed=21) - 1.0)
        for d in (10, 100, 1000)
    ]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 0.1


def test_default_thresholds():
    assert default_threshold(40, IMQ) == 40.0
    assert default_threshold(1, SQEXP) == pytest.approx(1.4427, abs=1e-4)
    assert default_threshold(1, IMQ) == 1.0


def test_tuned_threshold_scalar_case():
    tuned = tune_threshold(1, IMQ, n_samples=400_000, seed=3)
    assert tuned == pytest.approx(0.375, abs=0.02)
    # The squared-exponential default already hits the target at any d_y.
    tuned_sqexp = tune_threshold(1, SQEXP, n_samples=400_000, seed=3)
    est = expected_weight_mc(1, tuned_sqexp, SQEXP, n_samples=400_000, seed=3)
    assert est == pytest.approx(1.0, abs=6e-3)


def test_expected_weight_deterministic_under_seed():
    a = expected_weight_mc(3, 2.0, IMQ, n_samples=10_000, seed=42)
    b = expected_weight_mc(3, 2.0, IMQ, n_samples=10_000, seed=42)
    assert a == b
