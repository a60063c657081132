import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from fadacs.errors import ConstantInput, DegenerateSampleSize
from fadacs.stats import F_MAX, betainc, f_sf, feature_screen, pearson, regression_f_test


def test_pearson_simple_cases():
    x = np.arange(10.0)
    assert pearson(x, x) == 1.0
    assert pearson(x, -2 * x + 3) == -1.0


def test_pearson_matches_covariance_formula():
    x, y = [1.0, 2, 3, 4], [2.0, 1, 4, 3]
    mx, my = sum(x) / 4, sum(y) / 4
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    assert abs(pearson(x, y) - cov / (sx * sy)) < 1e-12


def test_pearson_errors():
    with pytest.raises(ConstantInput):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateSampleSize):
        pearson([1], [2])


def f_density(x, d1, d2):
    logc = (0.5 * d1 * math.log(d1) + 0.5 * d2 * math.log(d2)
            - (math.lgamma(d1 / 2) + math.lgamma(d2 / 2) - math.lgamma((d1 + d2) / 2)))
    return math.exp(logc + (d1 / 2 - 1) * math.log(x) - (d1 + d2) / 2 * math.log(d2 + d1 * x))


def quadrature_sf(f, d1, d2):
    val, _ = integrate.quad(f_density, f, np.inf, args=(d1, d2), epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def fixture_with_r(n, r):
    rng = np.random.default_rng(5)
    x = rng.normal(size=n)
    e = rng.normal(size=n)
    x -= x.mean()
    e -= e.mean()
    e -= (e @ x) / (x @ x) * x  # orthogonal to x
    x /= np.linalg.norm(x)
    e /= np.linalg.norm(e)
    return x, r * x + math.sqrt(1 - r * r) * e


def test_f_test_n50_r_half():
    x, y = fixture_with_r(50, 0.5)
    assert pearson(x, y) == pytest.approx(0.5, abs=1e-12)
    f, p = regression_f_test(x, y)
    assert f == pytest.approx(16.0, abs=1e-9)
    assert abs(p - quadrature_sf(16.0, 1, 48)) < 1e-6


def test_f_test_zero_correlation():
    x, y = fixture_with_r(10, 0.0)
    f, p = regression_f_test(x, y)
    assert f == pytest.approx(0.0, abs=1e-20) and p == pytest.approx(1.0, abs=1e-12)


def test_f_test_perfect_fit():
    f, p = regression_f_test([1, 2, 3, 4], [2, 4, 6, 8])
    assert (f, p) == (F_MAX, 0.0)


def test_f_test_needs_three_samples():
    with pytest.raises(DegenerateSampleSize):
        regression_f_test([1, 2], [2, 1])


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 30), st.floats(0.05, 30), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    assert abs(betainc(a, b, x) - special.betainc(a, b, x)) < 1e-9


@pytest.mark.parametrize("f,d1,d2", [(0.5, 1, 10), (3.0, 1, 200), (16.0, 1, 48), (2.0, 3, 7)])
def test_f_sf_matches_quadrature(f, d1, d2):
    assert abs(f_sf(f, d1, d2) - quadrature_sf(f, d1, d2)) < 1e-6


def test_screen_recovers_constructed_correlation():
    rng = np.random.default_rng(0)
    n = 20_000
    hum = rng.normal(size=n)
    noise = rng.normal(scale=0.5, size=n)
    occ = 0.5 * hum + noise
    analytic = math.sqrt(0.25 / (0.25 + 0.25))
    rows = feature_screen({"humidity": hum, "flat": np.ones(n)}, occ, order=["flat", "humidity"])
    assert [r.feature for r in rows] == ["flat", "humidity"]
    assert rows[0].pcc is None and rows[0].note == "ConstantInput"
    assert abs(rows[1].pcc - analytic) < 0.05
    assert rows[1].p_value < 1e-10 and rows[1].n == n


def test_screen_recovers_opposite_signs():
    rng = np.random.default_rng(1)
    signs = {}
    for domain, coef in (("A", 0.4), ("B", -0.4)):
        hum = rng.normal(size=3000)
        occ = coef * hum + rng.normal(scale=0.5, size=3000)
        (row,) = feature_screen({"humidity": hum}, occ)
        signs[domain] = row.pcc
    assert signs["A"] > 0.1 and signs["B"] < -0.1
