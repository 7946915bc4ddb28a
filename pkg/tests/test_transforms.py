import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lhmm_portfolio.errors import DomainError
from lhmm_portfolio.transforms import (
    fit_lambda,
    fit_lambdas,
    yj_inverse,
    yj_inverse_valid,
    yj_loglik,
    yj_range,
    yj_transform,
)


def yj_reference(y, lam):
    """Straight-line coding of the four branches."""
    if y >= 0:
        if lam != 0:
            return ((y + 1) ** lam - 1) / lam
        return math.log(y + 1)
    if lam != 2:
        return -((-y + 1) ** (2 - lam) - 1) / (2 - lam)
    return -math.log(-y + 1)


def test_fixed_points():
    for lam in (-3.0, -0.5, 0.0, 0.7, 1.0, 2.0, 4.0):
        assert yj_transform(0.0, lam) == 0.0
        assert yj_inverse(0.0, lam) == 0.0
    assert yj_transform(1.0, 1.0) == pytest.approx(1.0, abs=1e-15)


def test_branch_oracle():
    assert yj_transform(-0.5, 0.5) == pytest.approx(yj_reference(-0.5, 0.5), rel=1e-14)
    for y in (-0.9, -0.2, 0.0, 0.3, 2.0):
        for lam in (-2.0, 0.0, 0.5, 1.0, 2.0, 3.5):
            assert yj_transform(y, lam) == pytest.approx(yj_reference(y, lam), rel=1e-12, abs=1e-15)


def test_matches_scipy():
    y = np.linspace(-0.6, 0.6, 25)
    for lam in (-1.0, 0.3, 1.7):
        np.testing.assert_allclose(yj_transform(y, lam), stats.yeojohnson(y, lmbda=lam), rtol=1e-12)


def test_identity_at_one():
    y = np.linspace(-0.9, 3, 50)
    np.testing.assert_allclose(yj_transform(y, 1.0), y, atol=1e-15)
    np.testing.assert_allclose(yj_inverse(y, 1.0), y, atol=1e-15)


def test_round_trip_uniform_draws():
    y = np.random.default_rng(0).uniform(-0.5, 0.5, 1000)
    assert np.max(np.abs(yj_inverse(yj_transform(y, 0.3), 0.3) - y)) < 1e-10


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.95, 5.0), st.floats(-5.0, 5.0))
def test_round_trip_property(y, lam):
    assert abs(yj_inverse(yj_transform(y, lam), lam) - y) < 1e-10 * max(1.0, abs(y))


@settings(max_examples=100, deadline=None)
@given(st.floats(-5.0, 5.0))
def test_strictly_increasing(lam):
    y = np.linspace(-0.9, 2.0, 300)
    assert np.all(np.diff(yj_transform(y, lam)) > 0)


def test_inverse_domain_error():
    lo, hi = yj_range(-0.5)
    assert hi == pytest.approx(2.0)
    with pytest.raises(DomainError):
        yj_inverse(2.5, -0.5)
    lo, hi = yj_range(3.0)
    assert lo == pytest.approx(-1.0)
    with pytest.raises(DomainError):
        yj_inverse(-1.5, 3.0)
    assert yj_range(1.0) == (-math.inf, math.inf)
    mask = yj_inverse_valid(np.array([0.0, 1.9, 2.0, 3.0]), -0.5)
    assert mask.tolist() == [True, True, False, False]


def test_loglik_matches_scipy():
    y = np.random.default_rng(3).normal(0, 0.05, 200)
    for lam in (-1.0, 0.0, 0.8, 2.0):
        assert yj_loglik(y, lam) == pytest.approx(stats.yeojohnson_llf(lam, y), rel=1e-9)


def test_fit_normal_series_near_one():
    # at this scale the curvature that identifies lambda is visible
    y = np.random.default_rng(11).normal(0, 0.25, 5000)
    assert abs(fit_lambda(y).lam[0] - 1.0) <= 0.15


@pytest.mark.xfail(reason="at sd 0.02 the transform is nearly linear; lambda-hat has sd ~0.9 at n=2000", strict=False)
def test_fit_normal_series_small_scale():
    y = np.random.default_rng(11).normal(0, 0.02, 2000)
    lam = fit_lambda(y).lam[0]
    assert lam == pytest.approx(stats.yeojohnson(y)[1], abs=2e-3)
    assert abs(lam - 1.0) <= 0.15


def test_fit_right_skewed_below_one():
    y = np.expm1(np.random.default_rng(12).normal(0, 0.5, 1000))
    assert fit_lambda(y).lam[0] < 1.0


def test_fit_agrees_with_scipy():
    y = np.expm1(np.random.default_rng(13).normal(0, 0.3, 500))
    _, lam_scipy = stats.yeojohnson(y)
    assert fit_lambda(y).lam[0] == pytest.approx(lam_scipy, abs=2e-3)


def test_fit_constant_series():
    with pytest.raises(ValueError, match="zero variance"):
        fit_lambda(np.full(100, 0.01))


def test_fit_lambdas_rowwise():
    rng = np.random.default_rng(4)
    Y = np.vstack([rng.normal(0, 0.02, 300), np.expm1(rng.normal(0, 0.4, 300))])
    p = fit_lambdas(Y)
    assert p.lam.shape == (2,)
    np.testing.assert_allclose(p.inverse(p.transform(Y)), Y, atol=1e-10)
