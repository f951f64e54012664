from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_design.design import ExactDesign, apportion, d_optimal_emax
from adaptive_design.estimation import (
    GRID_POINTS,
    StageData,
    TwoStageData,
    emax_bias_coefficient,
    fit_means_batch,
    fit_mle,
    neg_log_likelihood_kernel,
    profile_rss,
    read_dataset_csv,
    score,
    simulate_stage,
    stage1_bias_theta2,
    write_dataset_csv,
)
from adaptive_design.exceptions import DomainError, RankDeficiencyError
from adaptive_design.model import DoseInterval, ModelParams, ParameterBox, emax_mean
from adaptive_design.streams import replicate_rng
from oracles import central_gradient

IV = DoseInterval(0.0, 150.0)
SEED = 12345


def noiseless(design: ExactDesign, theta) -> StageData:
    return StageData(design, emax_mean(design.points, theta))


def two_stage(theta, sigma, seed, n1=27, n2=270, guess=25.0):
    rng = np.random.default_rng(seed)
    xi = d_optimal_emax(guess, IV)
    s1 = simulate_stage(apportion(xi, n1), theta, sigma, rng)
    s2 = simulate_stage(apportion(xi, n2), theta, sigma, rng)
    return TwoStageData(s1, s2, sigma)


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

def test_simulate_stage_without_noise(theta_ref):
    ex = apportion(d_optimal_emax(25.0, IV), 27)
    st_ = simulate_stage(ex, theta_ref, 1e-12, np.random.default_rng(1))
    np.testing.assert_allclose(st_.means, emax_mean(ex.points, theta_ref), atol=1e-9)


def test_simulate_stage_is_deterministic(theta_ref):
    ex = apportion(d_optimal_emax(25.0, IV), 27)
    a = simulate_stage(ex, theta_ref, 0.3, np.random.default_rng(5))
    b = simulate_stage(ex, theta_ref, 0.3, np.random.default_rng(5))
    np.testing.assert_array_equal(a.means, b.means)
    for ra, rb in zip(a.raw, b.raw):
        np.testing.assert_array_equal(ra, rb)


def test_simulate_stage_moments(theta_ref):
    n, sigma = 100_000, 0.5
    ex = ExactDesign([30.0], [n])
    st_ = simulate_stage(ex, theta_ref, sigma, replicate_rng(SEED, 0))
    eta = emax_mean(30.0, theta_ref)
    assert abs(st_.means[0] - eta) < 4 * sigma / math.sqrt(n)
    assert abs(np.var(st_.raw[0], ddof=1) / sigma**2 - 1) < 0.10


def test_stage_data_rejects_inconsistent_raw(theta_ref):
    ex = ExactDesign([0.0, 10.0], [2, 2])
    with pytest.raises(ValueError):
        StageData(ex, [1.0, 2.0], (np.array([1.0, 1.0]), np.array([2.0, 2.5])))


def test_means_only_draws_have_exact_law(theta_ref):
    ex = ExactDesign([0.0, 30.0, 150.0], [4, 9, 16])
    rng = replicate_rng(SEED, 1)
    draws = np.array([simulate_stage(ex, theta_ref, 0.2, rng, raw=False).means for _ in range(20000)])
    sd = draws.std(axis=0, ddof=1)
    np.testing.assert_allclose(sd, 0.2 / np.sqrt([4, 9, 16]), rtol=0.03)


# ---------------------------------------------------------------------------
# Likelihood kernel and score
# ---------------------------------------------------------------------------

def test_kernel_vanishes_on_noiseless_data(theta_ref):
    ex = apportion(d_optimal_emax(25.0, IV), 27)
    data = TwoStageData(noiseless(ex, theta_ref), noiseless(ex, theta_ref), 0.1)
    assert neg_log_likelihood_kernel(data, theta_ref) == 0.0


def test_kernel_location_equivariance(theta_ref):
    data = two_stage(theta_ref, 0.1, 3)
    c = 1.75
    shifted = TwoStageData(
        StageData(data.stage1.design, data.stage1.means + c),
        StageData(data.stage2.design, data.stage2.means + c),
        0.1,
    )
    theta_c = theta_ref.replace(theta0=theta_ref.theta0 + c)
    assert neg_log_likelihood_kernel(shifted, theta_c) == pytest.approx(
        neg_log_likelihood_kernel(data, theta_ref), rel=1e-12
    )


def test_kernel_hand_computed():
    theta = (1.0, 2.0, 3.0)
    s1 = StageData(ExactDesign([0.0, 3.0], [2, 1]), [1.5, 1.0])
    s2 = StageData(ExactDesign([6.0], [4]), [2.0])
    # eta(0)=1, eta(3)=2, eta(6)=1+2*6/9=7/3
    expected = 2 * 0.5**2 + 1 * (-1.0) ** 2 + 4 * (2.0 - 7 / 3) ** 2
    got = neg_log_likelihood_kernel(TwoStageData(s1, s2, 1.0), theta)
    assert got == pytest.approx(expected, rel=1e-15)


def test_score_matches_finite_differences(theta_ref):
    data = two_stage(theta_ref, 0.1, 4)
    at = np.array([2.01, 0.45, 27.0])
    fd = central_gradient(lambda t: neg_log_likelihood_kernel(data, t), at)
    expected = -fd / (2 * data.sigma**2)
    np.testing.assert_allclose(score(data, at), expected, rtol=1e-5)


def test_score_zero_on_noiseless_data(theta_ref):
    ex = apportion(d_optimal_emax(25.0, IV), 27)
    data = TwoStageData(noiseless(ex, theta_ref), noiseless(ex, theta_ref), 0.1)
    assert np.all(score(data, theta_ref) == 0.0)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_score_vanishes_at_mle(theta_ref, seed):
    data = two_stage(theta_ref, 0.1, seed)
    fit = fit_mle(data)
    assert fit.converged and not fit.at_boundary
    tol = 1e-6 * (1 + neg_log_likelihood_kernel(data, fit.theta_hat))
    assert np.all(np.abs(score(data, fit.theta_hat)) <= tol)


def test_score_needs_sigma_for_single_stage(theta_ref):
    data = noiseless(ExactDesign([0.0, 1.0, 2.0], [1, 1, 1]), theta_ref)
    with pytest.raises(ValueError):
        score(data, theta_ref)


# ---------------------------------------------------------------------------
# Maximum likelihood
# ---------------------------------------------------------------------------

def test_fit_recovers_truth_without_noise(theta_ref):
    ex = ExactDesign([0.0, 18.75, 150.0], [9, 9, 9])
    fit = fit_mle(noiseless(ex, theta_ref))
    np.testing.assert_allclose(fit.theta_hat.as_array(), [2.0, 0.467, 25.0], atol=1e-6)
    assert fit.converged


@settings(max_examples=40, deadline=None)
@given(
    t2=st.floats(0.1, 800),
    t1=st.floats(0.2, 3.0),
    mid=st.lists(st.floats(0.5, 149.5), min_size=1, max_size=3, unique=True),
)
def test_fit_recovers_truth_on_general_designs(t2, t1, mid):
    theta = ModelParams(2.0, t1, t2)
    pts = np.sort(np.array([0.0, 150.0] + mid))
    ex = ExactDesign(pts, np.full(pts.size, 5))
    fit = fit_mle(noiseless(ex, theta))
    np.testing.assert_allclose(fit.theta_hat.as_array(), theta.as_array(), rtol=1e-6, atol=1e-6)


def test_fit_invariant_to_point_order(theta_ref):
    data = two_stage(theta_ref, 0.2, 8)
    x = np.concatenate([data.stage1.design.points, data.stage2.design.points])
    n = np.concatenate([data.stage1.design.counts, data.stage2.design.counts]).astype(float)
    y = np.concatenate([data.stage1.means, data.stage2.means])
    perm = np.random.default_rng(0).permutation(x.size)
    a = fit_means_batch(x, n, y[None, :])
    b = fit_means_batch(x[perm], n[perm], y[perm][None, :])
    np.testing.assert_allclose(a.theta, b.theta, rtol=1e-10)


def test_fit_is_argmin_over_grid(theta_ref):
    data = two_stage(theta_ref, 0.2, 9)
    fit = fit_mle(data, trace=True)
    assert len(fit.profile_trace) == GRID_POINTS
    best = profile_rss(data, fit.theta_hat.theta2)
    assert all(best <= rss for _, rss in fit.profile_trace)
    assert fit.rss == pytest.approx(float(best), rel=1e-12)


def test_profiled_residuals_orthogonal_to_regressors(theta_ref):
    data = two_stage(theta_ref, 0.2, 10)
    fit = fit_mle(data)
    x = np.concatenate([data.stage1.design.points, data.stage2.design.points])
    n = np.concatenate([data.stage1.design.counts, data.stage2.design.counts]).astype(float)
    y = np.concatenate([data.stage1.means, data.stage2.means])
    resid = y - emax_mean(x, fit.theta_hat)
    z = x / (x + fit.theta_hat.theta2)
    assert abs(np.sum(n * resid)) < 1e-10
    assert abs(np.sum(n * resid * z)) < 1e-10


def test_single_dose_is_rank_deficient(theta_ref):
    with pytest.raises(RankDeficiencyError):
        fit_mle(noiseless(ExactDesign([20.0], [30]), theta_ref))


def test_two_doses_are_rank_deficient(theta_ref):
    with pytest.raises(RankDeficiencyError):
        fit_mle(noiseless(ExactDesign([0.0, 20.0], [15, 15]), theta_ref))


def test_boundary_fit_is_flagged():
    x = np.array([0.0, 50.0, 100.0, 150.0])
    fit = fit_mle(StageData(ExactDesign(x, [5, 5, 5, 5]), 1.0 + 0.01 * x))
    assert fit.at_boundary and not fit.converged
    assert fit.theta_hat.theta2 == 1500.0


def test_fit_respects_custom_box(theta_ref):
    ex = ExactDesign([0.0, 18.75, 150.0], [9, 9, 9])
    fit = fit_mle(noiseless(ex, theta_ref), box=ParameterBox(30.0, 60.0))
    assert fit.theta_hat.theta2 == 30.0 and fit.at_boundary


def test_residual_variance_reported_with_raw_data(theta_ref):
    data = two_stage(theta_ref, 0.3, 11, n1=300, n2=3000)
    fit = fit_mle(data)
    assert fit.sigma2_hat == pytest.approx(0.09, rel=0.1)


def test_mle_bias_matches_first_order_prediction_at_n297(theta_ref):
    # 99 subjects at each point of the design at theta2 = 25
    ex = apportion(d_optimal_emax(25.0, IV), 297)
    c = ex.counts.astype(float)
    eta = emax_mean(ex.points, theta_ref)
    y = eta + 0.1 / np.sqrt(c) * replicate_rng(SEED, 99).standard_normal((500, 3))
    t2 = fit_means_batch(ex.points, c, y).theta[:, 2]
    se = t2.std(ddof=1) / math.sqrt(t2.size)
    predicted = 25.0 + stage1_bias_theta2(theta_ref, 25.0, IV, 0.1, 297)
    assert abs(t2.mean() - predicted) <= 3 * se


# ---------------------------------------------------------------------------
# First-order bias
# ---------------------------------------------------------------------------

def test_bias_positive_on_parameter_grid():
    for t2 in np.geomspace(0.015, 1500, 10):
        for g in np.geomspace(0.015, 1500, 10):
            for sigma in np.geomspace(0.01, 2.0, 10):
                assert stage1_bias_theta2((2.0, 0.467, t2), g, IV, sigma, 27) > 0


def test_bias_scales_with_sigma_squared(theta_ref):
    one = stage1_bias_theta2(theta_ref, 25.0, IV, 0.25, 27)
    two = stage1_bias_theta2(theta_ref, 25.0, IV, 0.5, 27)
    assert two == 4 * one


def test_bias_matches_box_nonlinear_regression_formula(theta_ref):
    # Box's bias for nonlinear least squares:
    # b = -(sigma^2 / 2) F^{-1} sum_i g_i tr(F^{-1} H_i), F = sum_i g_i g_i^T
    from adaptive_design.model import emax_gradient, emax_hessian

    for t2, guess, a, b in [(25.0, 25.0, 0.0, 150.0), (50.0, 10.0, 0.0, 150.0), (7.0, 90.0, 2.0, 40.0)]:
        theta = ModelParams(2.0, 0.467, t2)
        iv = DoseInterval(a, b)
        x = d_optimal_emax(guess, iv).points
        g = emax_gradient(x, theta)
        h = emax_hessian(x, theta)
        f_inv = np.linalg.inv(g.T @ g)
        traces = np.einsum("ij,mji->m", f_inv, h)
        sigma = 0.3
        box = -(sigma**2 / 2) * f_inv @ (g.T @ traces)
        assert emax_bias_coefficient(theta, guess, iv, sigma) / 3 == pytest.approx(box[2], rel=1e-10)


@pytest.mark.parametrize(
    "theta,guess,iv",
    [((2.0, 0.0, 25.0), 25.0, IV), ((2.0, 0.467, 25.0), 0.0, IV)],
)
def test_bias_domain_errors(theta, guess, iv):
    with pytest.raises(DomainError):
        stage1_bias_theta2(theta, guess, iv, 0.25, 27)


def test_bias_requires_equal_allocation(theta_ref):
    with pytest.raises(ValueError):
        stage1_bias_theta2(theta_ref, 25.0, IV, 0.25, 28)


def test_first_order_bias_attained_as_noise_shrinks(theta_ref):
    """The remainder is O(sigma^4 / n1^2), so at small noise the first-order
    term must match the simulated bias."""
    sigma, n1, reps = 0.0125, 27, 100_000
    ex = apportion(d_optimal_emax(25.0, IV), n1)
    c = ex.counts.astype(float)
    eta = emax_mean(ex.points, theta_ref)
    y = eta + sigma / np.sqrt(c) * replicate_rng(SEED, 7).standard_normal((reps, 3))
    t2 = fit_means_batch(ex.points, c, y).theta[:, 2]
    err = t2 - 25.0
    se = err.std(ddof=1) / math.sqrt(reps)
    assert abs(err.mean() - stage1_bias_theta2(theta_ref, 25.0, IV, sigma, n1)) <= 3 * se


# ---------------------------------------------------------------------------
# CSV datasets
# ---------------------------------------------------------------------------

def test_dataset_csv_round_trip(tmp_path, theta_ref):
    data = two_stage(theta_ref, 0.1, 12, n1=9, n2=12)
    path = tmp_path / "data.csv"
    write_dataset_csv(path, [data.stage1, data.stage2], {"seed": 12})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed = 12"
    assert lines[1] == "stage,dose,replicate,y"
    back = read_dataset_csv(path, 0.1)
    assert isinstance(back, TwoStageData)
    np.testing.assert_array_equal(back.stage1.means, data.stage1.means)
    np.testing.assert_array_equal(back.stage2.design.counts, data.stage2.design.counts)


@pytest.mark.parametrize(
    "body",
    ["dose,y\n1,2\n", "stage,dose,replicate,y\n1,0,1\n", "stage,dose,replicate,y\n1,abc,1,2\n",
     "stage,dose,replicate,y\n3,0,1,2\n", "stage,dose,replicate,y\n"],
)
def test_dataset_csv_rejects_malformed(tmp_path, body):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(ValueError):
        read_dataset_csv(path, 0.1)
