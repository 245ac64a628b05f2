import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msdyn.closed_form import (EstimatorDoesNotExist, TwoStepSample, augmented_estimate, averaging_estimate,
                               bias_variance_study, derivative_value, estimate_batch, estimate_theta,
                               grid_scan_roots, loss_derivative_roots, solve_cubic, solve_depressed_cubic,
                               sufficient_stats, two_step_loss)


def test_loss_zero_at_truth_without_noise():
    th, s = 0.78, 1.3
    for a in (0.0, 0.3, 1.0):
        assert two_step_loss(th, a, TwoStepSample(s, th * s, th * th * s)) == 0.0


def test_loss_arithmetic():
    assert two_step_loss(0.0, 1.0, TwoStepSample(1.0, 2.0, 0.0)) == 4.0
    assert two_step_loss(1.0, 0.5, TwoStepSample(1.0, 0.0, 0.0)) == 1.0


def test_alpha_range():
    with pytest.raises(ValueError):
        loss_derivative_roots(1.5, TwoStepSample(1, 1, 1))


def test_roots_linear_case():
    assert loss_derivative_roots(1.0, TwoStepSample(2.0, 1.6, 0.0)) == pytest.approx([0.8])


def test_roots_factored_cubic():
    assert loss_derivative_roots(0.0, TwoStepSample(1.0, 0.0, 0.64)) == pytest.approx([-0.8, 0.0, 0.8], abs=1e-15)


def test_root_count_transition_matches_grid_scan():
    th, s = 0.78, 1.0
    counts = set()
    for a in np.linspace(0.0, 0.99, 34):
        sample = TwoStepSample(s, th * s, th * th * s)
        roots = loss_derivative_roots(a, sample)
        scan = grid_scan_roots(a, sample, -2, 2, 1e-4)
        assert len(roots) == len(scan)
        assert np.allclose(roots, scan, atol=1e-4)
        counts.add(len(roots))
    assert counts == {1, 3}


def test_solve_cubic_general():
    assert solve_cubic(1, -6, 11, -6) == pytest.approx([1, 2, 3])
    assert solve_cubic(0, 0, 2, -1) == pytest.approx([0.5])


def test_depressed_cubic_one_real_root():
    r = solve_depressed_cubic(np.array(1.0), np.array(2.0))
    real = r[np.isfinite(r)]
    assert len(real) == 1
    assert real[0] ** 3 + real[0] + 2 == pytest.approx(0, abs=1e-12)


def test_alpha1_single_sample():
    assert estimate_theta(1.0, TwoStepSample(1.0, 0.9, 0.0)).theta_hat == pytest.approx(0.9, abs=1e-15)


def test_alpha0_single_sample_sign():
    assert estimate_theta(0.0, TwoStepSample(1.0, 0.0, 0.64)).theta_hat == pytest.approx(0.8, abs=1e-15)
    assert estimate_theta(0.0, TwoStepSample(1.0, 0.0, 0.64), "-").theta_hat == pytest.approx(-0.8, abs=1e-15)


def test_alpha0_nonexistent():
    with pytest.raises(EstimatorDoesNotExist):
        estimate_theta(0.0, TwoStepSample(1.0, 0.5, -0.1))


def test_noiseless_recovery_all_alphas():
    th, s = np.array([0.5, 1.0, 2.0]), None
    s = np.array([0.5, 1.0, 2.0])
    for a in np.linspace(0, 1, 11):
        r = estimate_theta(a, (s, 0.7 * s, 0.49 * s))
        assert r.theta_hat == pytest.approx(0.7, abs=1e-12)


def test_augmented_and_averaging_noiseless():
    s = np.array([1.0, 2.0])
    assert augmented_estimate(s, 0.6 * s, 0.36 * s) == pytest.approx(0.6)
    assert averaging_estimate(s, 0.6 * s, 0.6 * s) == pytest.approx(0.6)


def test_study_shapes_and_ordering():
    rep = bias_variance_study([0.5, 0.8], sigma_list=(0.0, 0.5), n_mc=50, seed=1, n_boot=200)
    assert rep.estimators() == ["alpha=0", "alpha=0.5", "alpha=1"]
    for r in rep.rows:
        assert r.variance >= 0
        assert r.bias_lo <= r.bias <= r.bias_hi
        assert r.var_lo <= r.variance <= r.var_hi
    assert rep.get("alpha=1", 0.0).bias == 0.0
    lines = rep.to_csv().splitlines()
    assert lines[0] == "estimator,sigma,statistic,value,ci_lo,ci_hi,n,dropped"
    assert len(lines) == 1 + 2 * len(rep.rows)


samples = st.tuples(st.floats(0.1, 3.0) | st.floats(-3.0, -0.1), st.floats(-3, 3), st.floats(-3, 3))


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 0.99), samples)
def test_roots_are_stationary(alpha, sample):
    s, o1, o2 = sample
    s2, p1, p2 = sufficient_stats(np.array([s]), np.array([o1]), np.array([o2]))
    scale = max(abs(s2), abs(p1), abs(p2), 1.0)
    for r in loss_derivative_roots(alpha, TwoStepSample(*sample)):
        assert abs(derivative_value(r, alpha, s2, p1, p2)) < 1e-9 * scale * max(1.0, abs(r)) ** 3


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 0.99), samples)
def test_estimate_is_best_root_with_hinted_sign(alpha, sample):
    res = estimate_theta(alpha, TwoStepSample(*sample))
    assert res.theta_hat in res.roots
    same_sign = [r for r in res.roots if np.sign(r) == np.sign(res.theta_hat)]
    lt = two_step_loss(res.theta_hat, alpha, TwoStepSample(*sample))
    for r in same_sign:
        assert lt <= two_step_loss(r, alpha, TwoStepSample(*sample)) + 1e-12
    if res.selected == "global":
        for r in res.roots:
            assert lt <= two_step_loss(r, alpha, TwoStepSample(*sample)) + 1e-12 * max(1.0, lt)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(0, 10_000))
def test_batch_matches_scalar(alpha, seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.5, 2, (20, 4))
    o1 = 0.7 * s + rng.normal(0, 0.5, s.shape)
    o2 = 0.49 * s + rng.normal(0, 0.5, s.shape)
    batch = estimate_batch(alpha, s, o1, o2)
    for i in range(len(s)):
        assert batch[i] == estimate_theta(alpha, (s[i], o1[i], o2[i])).theta_hat


def test_alpha0_estimator_formula():
    rng = np.random.default_rng(3)
    s = rng.uniform(0.5, 2, 30)
    o2 = 0.5 * s + rng.normal(0, 0.1, 30)
    expected = math.sqrt(np.sum(o2 * s) / np.sum(s * s))
    assert estimate_theta(0.0, (s, np.zeros(30), o2)).theta_hat == pytest.approx(expected, abs=1e-12)
