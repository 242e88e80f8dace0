import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, nll_direct, ols
from tdr.lls import (
    Family,
    LlsModel,
    PerfectFitError,
    ReparamCoefficients,
    fit_lls,
    fit_reparam,
    nll,
    nll_gradient,
    predict_distribution,
    standardized_residuals,
)

BASES = ("normal", "logistic", "sev")


def test_family_names():
    assert Family.parse("weibull") == Family("sev", True)
    assert Family.parse("LogNormal").name == "lognormal"
    assert Family.parse("loglogistic").base == "logistic"
    with pytest.raises(ValueError):
        Family.parse("gamma")
    with pytest.raises(ValueError):
        Family.parse("lognormal").transform([1.0, 0.0])


def test_standardized_residual_examples():
    c = ReparamCoefficients(0.0, [0.0], 1.0)
    np.testing.assert_array_equal(standardized_residuals([2.0, 3.0], [[0.0], [0.0]], c), [2, 3])
    c = ReparamCoefficients(1.0, [1.0], 2.0)
    np.testing.assert_array_equal(standardized_residuals([2.0], [[3.0]], c), [0.0])
    with pytest.raises(ValueError):
        standardized_residuals([1.0, 2.0], [[1.0]], c)


def test_natural_form_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        b0, b1, sigma = rng.normal(), rng.normal(size=3), rng.uniform(0.1, 3)
        y, s = rng.normal(size=7), rng.normal(size=(7, 3))
        c = ReparamCoefficients.from_natural(b0, b1, sigma)
        natural = (y - b0 - s @ b1) / sigma
        np.testing.assert_allclose(standardized_residuals(y, s, c), natural, rtol=1e-12, atol=1e-12)
        g0, g1, sg = c.to_natural()
        np.testing.assert_allclose([g0, *g1, sg], [b0, *b1, sigma], rtol=1e-12)


def test_nll_examples():
    assert nll("normal", [0.0, 0.0], 1.0) == pytest.approx(math.log(2 * math.pi), abs=1e-12)
    assert nll("logistic", [0.0], 1.0) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert nll("sev", [0.0], 1.0) == pytest.approx(1.0, abs=1e-12)
    assert nll("normal", [1.0], 1.0) == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5, abs=1e-12)
    with pytest.raises(ValueError):
        nll("normal", [0.0], 0.0)


@pytest.mark.parametrize("base", BASES)
def test_nll_matches_density(base):
    rng = np.random.default_rng(1)
    for _ in range(10):
        w = rng.normal(scale=2, size=6)
        st_ = rng.uniform(0.2, 4)
        assert nll(base, w, st_) == pytest.approx(nll_direct(base, w, st_), rel=1e-10)


def test_nll_stable_for_large_residuals():
    assert np.isfinite(nll("logistic", [800.0, -800.0], 1.0))
    assert nll("logistic", [800.0], 1.0) == pytest.approx(800.0, rel=1e-12)


def test_gradient_special_cases():
    c = ReparamCoefficients(1.0, [0.0], 1.0)
    g = nll_gradient("normal", [1.0, 1.0], [[0.3], [0.7]], c)
    assert g[0] == 0.0
    # M = 1: d/d sigma_t = -1/sigma_t + omega * y
    c = ReparamCoefficients(0.5, [0.2], 1.7)
    y, s = np.array([2.0]), np.array([[1.5]])
    w = standardized_residuals(y, s, c)[0]
    assert nll_gradient("normal", y, s, c)[-1] == pytest.approx(-1 / 1.7 + w * 2.0, rel=1e-14)


def _theta_nll(base, y, s):
    def f(theta):
        c = ReparamCoefficients.from_vector(theta)
        return nll(base, standardized_residuals(y, s, c), c.sigma_tilde)
    return f


@pytest.mark.parametrize("base", BASES)
def test_gradient_finite_differences(base):
    rng = np.random.default_rng(2)
    for _ in range(20):
        y, s = rng.normal(size=8), rng.normal(size=(8, 2))
        theta = np.concatenate([rng.normal(size=3) * 0.5, [rng.uniform(0.5, 2)]])
        c = ReparamCoefficients.from_vector(theta)
        g = nll_gradient(base, y, s, c)
        fd = central_diff(_theta_nll(base, y, s), theta)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1.0)


@pytest.mark.parametrize("base", BASES)
def test_nll_midpoint_convexity(base):
    rng = np.random.default_rng(3)
    y, s = rng.normal(size=10), rng.normal(size=(10, 2))
    f = _theta_nll(base, y, s)
    for _ in range(100):
        a = np.concatenate([rng.normal(size=3), [rng.uniform(0.1, 3)]])
        b = np.concatenate([rng.normal(size=3), [rng.uniform(0.1, 3)]])
        assert f(0.5 * a + 0.5 * b) <= 0.5 * f(a) + 0.5 * f(b) + 1e-10


def test_fit_lls_normal_example():
    m = fit_lls([0.0, 1.0, 1.0], [[0.0], [1.0], [2.0]], "normal")
    assert m.gamma0 == pytest.approx(1 / 6, abs=1e-12)
    assert m.gamma1[0] == pytest.approx(0.5, abs=1e-12)
    assert m.sigma == pytest.approx(math.sqrt(1 / 18), abs=1e-12)


def test_fit_lls_normal_equals_ols():
    rng = np.random.default_rng(4)
    s = rng.normal(size=(30, 3))
    y = 1 + s @ [0.5, -1.0, 2.0] + rng.normal(size=30) * 0.3
    m = fit_lls(y, s, "normal")
    ref = ols(y, s)
    np.testing.assert_allclose([m.gamma0, *m.gamma1], ref, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("base", ("logistic", "sev"))
def test_fit_reparam_converges(base):
    rng = np.random.default_rng(5)
    s = rng.normal(size=(60, 2))
    y = 0.3 + s @ [1.0, -0.5] + 0.4 * rng.logistic(size=60)
    res = fit_reparam(y, s, base)
    assert res.grad_norm <= 1e-10
    f = _theta_nll(base, y, s)
    best = f(res.coef.as_vector())
    for _ in range(50):
        pert = res.coef.as_vector() + rng.normal(scale=1e-3, size=4)
        assert best <= f(pert)


@pytest.mark.parametrize("family", ["normal", "logistic", "sev", "lognormal", "weibull", "loglogistic"])
def test_perfect_fit_detected(family):
    with pytest.raises(PerfectFitError):
        fit_lls(np.full(5, 3.0), np.zeros((5, 1)), family)


def test_rank_deficient_design_is_regularized():
    rng = np.random.default_rng(6)
    f = rng.normal(size=20)
    s = np.column_stack([f, 2 * f])
    m = fit_lls(1 + f + rng.normal(size=20) * 0.1, s, "normal")
    assert m.regularized
    assert np.all(np.isfinite(m.gamma1))


def test_lognormal_recovers_planted_parameters():
    rng = np.random.default_rng(7)
    s = rng.normal(size=(400, 2))
    t = np.exp(2.0 + s @ [0.3, -0.2] + 0.1 * rng.normal(size=400))
    m = fit_lls(t, s, "lognormal")
    np.testing.assert_allclose([m.gamma0, *m.gamma1, m.sigma], [2.0, 0.3, -0.2, 0.1], atol=0.02)


def test_predict_distribution_examples():
    m = LlsModel(Family.parse("normal"), 1.0, [2.0], 0.5)
    p = predict_distribution(m, [3.0])
    assert (p.location, p.scale, p.point_estimate) == (7.0, 0.5, 7.0)
    ln = LlsModel(Family.parse("lognormal"), 1.0, [2.0], 0.5)
    assert predict_distribution(ln, [3.0]).point_estimate == pytest.approx(math.exp(7), rel=1e-14)
    assert predict_distribution(m, [0.0]).location == 1.0
    with pytest.raises(ValueError):
        predict_distribution(m, [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.05, 3))
def test_weibull_point_estimate_is_median(loc, scale):
    m = LlsModel(Family.parse("weibull"), loc, [0.0], scale)
    t = predict_distribution(m, [0.0]).point_estimate
    # Weibull CDF in these coordinates: 1 - exp(-exp((log t - loc) / scale))
    cdf = 1 - math.exp(-math.exp((math.log(t) - loc) / scale))
    assert cdf == pytest.approx(0.5, abs=1e-12)
