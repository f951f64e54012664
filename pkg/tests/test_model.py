from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_design.exceptions import DomainError
from adaptive_design.model import (
    EMAX,
    DoseInterval,
    ModelParams,
    ParameterBox,
    emax_gradient,
    emax_hessian,
    emax_mean,
)
from oracles import central_gradient, emax_reference

EPS = np.finfo(float).eps

thetas = st.builds(
    ModelParams,
    st.floats(-10, 10),
    st.floats(-5, 5),
    st.floats(0.015, 1500),
)
# subnormal doses are excluded: a central difference cannot resolve them
doses = st.one_of(st.just(0.0), st.floats(1e-6, 150.0))


def fd_tolerance(reference, rel, scale, h):
    # relative error plus the cancellation floor of a central difference
    return rel * np.abs(reference) + 8 * EPS * scale / h


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

def test_params_reject_nonfinite_and_nonpositive_theta2():
    with pytest.raises(ValueError):
        ModelParams(math.nan, 1.0, 1.0)
    with pytest.raises(ValueError):
        ModelParams(1.0, 1.0, 0.0)


def test_params_round_trip_array():
    p = ModelParams(2.0, 0.467, 25.0)
    assert ModelParams.from_array(p.as_array()) == p
    assert tuple(p) == (2.0, 0.467, 25.0)


def test_box_membership():
    box = ParameterBox()
    assert 0.015 in box and 1500 in box
    assert 0.0149 not in box and 1500.1 not in box
    with pytest.raises(DomainError):
        box.check(ModelParams(2, 0.467, 2000))


def test_interval_validation():
    with pytest.raises(ValueError):
        DoseInterval(5.0, 5.0)
    with pytest.raises(ValueError):
        DoseInterval(-1.0, 5.0)


# ---------------------------------------------------------------------------
# Mean
# ---------------------------------------------------------------------------

def test_mean_at_zero_dose_is_placebo(theta_ref):
    assert emax_mean(0.0, theta_ref) == 2.0


def test_mean_approaches_asymptote(theta_ref):
    assert abs(emax_mean(1e9, theta_ref) - 2.467) < 1e-6


def test_mean_at_half_effect_dose(theta_ref):
    assert emax_mean(25.0, theta_ref) == pytest.approx(2.2335, abs=1e-15)


def test_mean_rejects_zero_denominator():
    with pytest.raises(DomainError):
        emax_mean(-1.0, (2.0, 0.5, 1.0))


@settings(max_examples=200, deadline=None)
@given(theta=thetas, x=st.lists(doses, min_size=2, max_size=20))
def test_mean_matches_reference(theta, x):
    got = emax_mean(np.array(x), theta)
    np.testing.assert_allclose(got, emax_reference(x, *theta), rtol=1e-14, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(t1=st.floats(0, 5), t2=st.floats(0.015, 1500))
def test_mean_monotone_in_dose(t1, t2):
    grid = np.linspace(0, 150, 301)
    vals = emax_mean(grid, (2.0, t1, t2))
    assert np.all(np.diff(vals) >= 0)


# ---------------------------------------------------------------------------
# Gradient
# ---------------------------------------------------------------------------

def test_gradient_at_zero_dose():
    np.testing.assert_array_equal(emax_gradient(0.0, (2.0, 0.467, 25.0)), [1.0, 0.0, 0.0])


def test_gradient_at_half_effect_dose(theta_ref):
    np.testing.assert_allclose(emax_gradient(25.0, theta_ref), [1.0, 0.5, -0.467 / 100], rtol=1e-15)


def test_gradient_matches_finite_differences_at_interior_point(theta_ref):
    x = 18.75
    fd = central_gradient(lambda t: emax_mean(x, t), theta_ref.as_array())
    g = emax_gradient(x, theta_ref)
    np.testing.assert_allclose(g, fd, rtol=1e-6)


@settings(max_examples=200, deadline=None)
@given(theta=thetas, x=doses)
def test_gradient_matches_finite_differences(theta, x):
    th = theta.as_array()
    fd = central_gradient(lambda t: emax_mean(x, t), th)
    g = emax_gradient(x, theta)
    h = np.array([1e-6 * (1 + abs(v)) for v in th])
    tol = fd_tolerance(g, 1e-6, abs(theta.theta0) + abs(theta.theta1), h)
    assert np.all(np.abs(fd - g) <= tol)


def test_gradient_shapes():
    assert emax_gradient(np.linspace(0, 150, 7), (2, 0.467, 25)).shape == (7, 3)
    assert emax_gradient(1.0, (2, 0.467, 25)).shape == (3,)


# ---------------------------------------------------------------------------
# Hessian
# ---------------------------------------------------------------------------

def test_hessian_zero_at_zero_dose():
    np.testing.assert_array_equal(emax_hessian(0.0, (2.0, 0.467, 25.0)), np.zeros((3, 3)))


def test_hessian_nonzero_pattern(theta_ref):
    x = 40.0
    h = emax_hessian(x, theta_ref)
    assert h[1, 2] == pytest.approx(-x / (x + 25) ** 2, rel=1e-15)
    assert h[2, 2] == pytest.approx(2 * 0.467 * x / (x + 25) ** 3, rel=1e-15)
    mask = np.ones((3, 3), dtype=bool)
    mask[1, 2] = mask[2, 1] = mask[2, 2] = False
    assert np.all(h[mask] == 0)


@settings(max_examples=100, deadline=None)
@given(theta=thetas, x=st.lists(doses, min_size=1, max_size=10))
def test_hessian_exactly_symmetric(theta, x):
    h = emax_hessian(np.array(x), theta)
    np.testing.assert_array_equal(h, np.swapaxes(h, -1, -2))


def test_hessian_matches_finite_differences_of_gradient(theta_ref):
    x = 25.0
    fd = central_gradient(lambda t: emax_gradient(x, t), theta_ref.as_array())
    h = emax_hessian(x, theta_ref)
    nz = h != 0
    np.testing.assert_allclose(h[nz], fd[nz], rtol=1e-5)
    assert np.max(np.abs(fd[~nz])) < 1e-9


def test_model_spec_dimensions(theta_ref):
    assert EMAX.dim == 3
    assert EMAX.gradient(3.0, theta_ref).shape == (EMAX.dim,)
    assert EMAX.hessian(3.0, theta_ref).shape == (EMAX.dim, EMAX.dim)
