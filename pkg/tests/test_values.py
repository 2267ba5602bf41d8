import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from crawlsched.values import (
    GREEDY,
    GREEDY_CIS,
    GREEDY_NCIS,
    PageParams,
    PageSet,
    Variant,
    approx,
    crawl_value,
    cum_freshness_w,
    frequency_f,
    objective_G,
    objective_o,
    psi,
    residual,
    value_sup,
)


def random_page(rng, mu_tilde=1.0):
    return PageParams(delta=rng.uniform(0.1, 2.0), lam=rng.uniform(0.05, 0.95),
                      nu=rng.uniform(0.05, 1.0), mu_tilde=mu_tilde)


def tail_series(i, x):
    """Direct tail sum e^{-x} sum_{j>i} x^j / j! in extended precision."""
    mpmath.mp.dps = 40
    x = mpmath.mpf(x)
    return float(mpmath.gammainc(i + 1, 0, x, regularized=True))


def quad_w_psi(iota, p):
    """Interval integrals: the interval is still running at time s iff the
    signal count n satisfies s + n*beta < iota. Freshness additionally needs
    no change besides false signals."""
    a, g, nu, b = p.alpha, p.gamma, p.nu, p.beta
    nmax = int(math.floor(iota / b)) if b > 0 else 0

    def running(s, rate, lead):
        tot = 0.0
        for n in range(0, (int((iota - s) / b) if b < math.inf else 0) + 1):
            tot += (rate * s) ** n / math.factorial(n)
        return math.exp(-lead * s) * tot

    pts = sorted({iota - k * b for k in range(1, nmax + 1) if 0 < iota - k * b < iota})
    psi_q = integrate.quad(lambda s: running(s, g, g), 0, iota, points=pts or None,
                           epsabs=0, epsrel=1e-12, limit=200)[0]
    w_q = integrate.quad(lambda s: running(s, nu, a + g), 0, iota, points=pts or None,
                         epsabs=0, epsrel=1e-12, limit=200)[0]
    return w_q, psi_q


# ---------------------------------------------------------------- residual

def test_residual_examples():
    assert residual(0, 0.0) == 0.0
    assert residual(0, 1.0) == pytest.approx(1 - math.exp(-1), rel=1e-14)
    assert residual(0, 1.0) == pytest.approx(0.63212056, abs=5e-9)
    assert residual(3, 2.0) == pytest.approx(0.14287654, abs=5e-9)


@pytest.mark.parametrize("i", [0, 1, 2, 3, 5, 10, 25, 60])
def test_residual_matches_extended_precision(i):
    for x in [1e-12, 1e-6, 0.01, 0.5, 1.0, i + 0.5, i + 1.0, i + 2.0, 3.0 * (i + 1), 80.0]:
        assert residual(i, x) == pytest.approx(tail_series(i, x), rel=1e-13, abs=1e-300)


def test_residual_small_x_keeps_digits():
    # the naive 1 - e^{-x} sum form loses everything here
    assert residual(2, 1e-5) == pytest.approx(1e-15 / 6, rel=1e-9)


def test_residual_domain_errors():
    with pytest.raises(ValueError):
        residual(-1, 1.0)
    with pytest.raises(ValueError):
        residual(1, -0.1)


@pytest.mark.parametrize("i", range(1, 11))
def test_residual_derivative_recurrence(i):
    xs = np.linspace(0.2, 20, 60)
    h = 1e-5
    fd = (residual(i, xs + h) - residual(i, xs - h)) / (2 * h)
    exact = residual(i - 1, xs) - residual(i, xs)
    direct = np.exp(i * np.log(xs) - xs - math.lgamma(i + 1))
    np.testing.assert_allclose(exact, direct, rtol=1e-9, atol=1e-15)
    mask = direct > 1e-5
    np.testing.assert_allclose(fd[mask], direct[mask], rtol=1e-5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 30), st.floats(0, 60), st.floats(0, 60))
def test_residual_monotone(i, x1, x2):
    lo, hi = min(x1, x2), max(x1, x2)
    assert 0.0 <= residual(i, lo) <= residual(i, hi) <= 1.0
    assert residual(i + 1, hi) <= residual(i, hi)


# ---------------------------------------------------------------- parameters

@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 10), st.floats(0, 1), st.floats(0, 5))
def test_param_identities(delta, lam, nu):
    p = PageParams(delta=delta, lam=lam, nu=nu)
    assert p.alpha + p.gamma == pytest.approx(p.delta + p.nu, rel=1e-12)
    assert p.alpha >= 0 and p.gamma >= 0


def test_beta_limits():
    assert PageParams(delta=1, lam=0.5, nu=0.0).beta == math.inf
    assert PageParams(delta=1, lam=0.0, nu=0.3).beta == 0.0
    assert PageParams(delta=1, lam=0.5, nu=0.5).beta == pytest.approx(2 * math.log(2))


def test_pageset_normalises_importance():
    ps = PageSet(delta=[1, 2, 3], mu=[1, 3, 6])
    assert ps.mu_tilde.sum() == pytest.approx(1.0, abs=1e-12)
    assert ps[2].mu_tilde == pytest.approx(0.6)


@pytest.mark.parametrize("kw", [dict(delta=-1), dict(delta=1, lam=1.5), dict(delta=1, nu=-0.1)])
def test_page_validation(kw):
    with pytest.raises(ValueError):
        PageParams(**kw)


# ---------------------------------------------------------------- psi, w, f

def test_psi_single_term():
    # gamma=1, beta=10: lam=1 gives alpha=0 which is clamped, so use tiny nu
    p = PageParams(delta=1.0, lam=1.0, nu=0.0)
    assert psi(2.0, p) == pytest.approx(1 - math.exp(-2), rel=1e-12)
    assert frequency_f(2.0, p) == pytest.approx(1.1565176, rel=1e-7)


def test_psi_no_signals_is_deterministic():
    p = PageParams(delta=0.7)
    for iota in [0.1, 1.0, 5.0]:
        assert psi(iota, p) == pytest.approx(iota, rel=1e-14)
    assert frequency_f(0.5, p) == pytest.approx(2.0)
    assert psi(0.0, p) == 0.0


def test_w_no_signal_closed_form():
    p = PageParams(delta=1.0)
    assert cum_freshness_w(2.0, p) == pytest.approx(1 - math.exp(-2), rel=1e-12)
    assert cum_freshness_w(0.0, PageParams(delta=1.0, lam=0.3, nu=0.4)) == 0.0
    q = PageParams(delta=1.3, lam=0.4, nu=0.2)
    assert cum_freshness_w(np.inf, q) == pytest.approx(1 / 1.3)


def test_frequency_rejects_zero():
    with pytest.raises(ValueError):
        frequency_f(0.0, PageParams(delta=1.0))
    assert frequency_f(np.inf, PageParams(delta=1.0, lam=0.5, nu=0.5)) == 0.0


@pytest.mark.parametrize("seed", range(12))
def test_psi_w_match_quadrature(seed):
    rng = np.random.default_rng(seed)
    p = random_page(rng)
    for k in [0.3, 1.5, 2.5, 3.7]:
        iota = k * p.beta
        w, ps = cum_freshness_w(iota, p), psi(iota, p)
        wq, pq = quad_w_psi(iota, p)
        assert ps == pytest.approx(pq, rel=1e-6)
        assert w == pytest.approx(wq, rel=1e-6)


@pytest.mark.parametrize("seed", range(50))
def test_derivative_ratio(seed):
    rng = np.random.default_rng(100 + seed)
    p = random_page(rng)
    # stay where psi' is not swamped by rounding: within a few 1/gamma past a kink
    k = rng.integers(0, 3)
    iota = k * p.beta + rng.uniform(0.05, 0.95) * min(p.beta, 3.0 / p.gamma)
    h = 1e-6 * max(iota, 1.0)
    dw = (cum_freshness_w(iota + h, p) - cum_freshness_w(iota - h, p)) / (2 * h)
    dp = (psi(iota + h, p) - psi(iota - h, p)) / (2 * h)
    assert dw / dp == pytest.approx(math.exp(-p.alpha * iota), rel=1e-4)


@pytest.mark.parametrize("seed", range(20))
def test_value_derivative(seed):
    rng = np.random.default_rng(200 + seed)
    p = random_page(rng, mu_tilde=rng.uniform(0.1, 1))
    k = rng.integers(0, 3)
    iota = k * p.beta + rng.uniform(0.05, 0.95) * min(p.beta, 3.0 / p.gamma)
    h = 1e-6 * max(iota, 1.0)
    fd = (crawl_value(iota + h, p) - crawl_value(iota - h, p)) / (2 * h)
    exact = p.mu_tilde * p.alpha * math.exp(-p.alpha * iota) * psi(iota, p)
    assert exact > 0
    assert fd == pytest.approx(exact, rel=1e-4)


@pytest.mark.parametrize("variant", [GREEDY, GREEDY_CIS, GREEDY_NCIS, approx(1), approx(2), approx(3)])
def test_monotone_on_grid(variant):
    rng = np.random.default_rng(7)
    grid = np.linspace(0.1, 10, 100)
    for _ in range(10):
        p = random_page(rng)
        v = crawl_value(grid, p, variant)
        assert np.all(np.diff(v) > 0)
        assert crawl_value(0.0, p, variant) == 0.0
        f = frequency_f(grid, p)
        assert np.all(np.diff(f) < 0)


# ---------------------------------------------------------------- variants

def test_variant_parsing():
    assert Variant.parse("greedy-ncis") == GREEDY_NCIS
    assert Variant.parse("approx-2") == approx(2)
    assert Variant.parse(GREEDY) is GREEDY
    with pytest.raises(ValueError):
        Variant.parse("approx-0")
    with pytest.raises(ValueError):
        Variant.parse("lazy")


def test_greedy_closed_form_and_sup():
    p = PageParams(delta=2.0, mu_tilde=0.4)
    grid = np.array([0.0, 0.3, 1.0, 4.0])
    np.testing.assert_allclose(crawl_value(grid, p, GREEDY), 0.2 * residual(1, 2 * grid), rtol=1e-14)
    assert value_sup(p, GREEDY) == pytest.approx(0.2)


def test_ncis_vanishing_signals_matches_greedy():
    grid = np.linspace(0.05, 8, 40)
    p = PageParams(delta=0.8, lam=1e-13, nu=1e-13)
    np.testing.assert_allclose(crawl_value(grid, p, GREEDY_NCIS), crawl_value(grid, p, GREEDY), rtol=1e-9)


def test_ncis_without_false_positives_matches_cis():
    grid = np.linspace(0.05, 8, 40)
    p = PageParams(delta=0.8, lam=0.6, nu=1e-14)
    q = PageParams(delta=0.8, lam=0.6, nu=0.0)
    np.testing.assert_allclose(crawl_value(grid, p, GREEDY_NCIS), crawl_value(grid, q, GREEDY_CIS), rtol=1e-9)


def test_cis_closed_form():
    p = PageParams(delta=1.2, lam=0.7, nu=0.5, mu_tilde=0.5)
    a, g = p.alpha, p.lam * p.delta
    for iota in [0.2, 1.0, 3.0]:
        exp = 0.5 * (residual(0, (a + g) * iota) / (a + g) - residual(0, g * iota) / (g * math.exp(a * iota)))
        assert crawl_value(iota, p, GREEDY_CIS) == pytest.approx(exp, rel=1e-12)
    # after a signal the effective time is infinite
    assert crawl_value(np.inf, p, GREEDY_CIS) == pytest.approx(0.5 / 1.2)


def test_approx_matches_exact_before_truncation():
    p = PageParams(delta=1.0, lam=0.5, nu=0.5)
    for j in [1, 2, 3]:
        grid = np.linspace(0.01, j * p.beta * 0.999, 30)
        np.testing.assert_allclose(crawl_value(grid, p, approx(j)), crawl_value(grid, p, GREEDY_NCIS), rtol=1e-13)
    beyond = 2.5 * p.beta
    assert crawl_value(beyond, p, approx(1)) < crawl_value(beyond, p, GREEDY_NCIS)


def test_ncis_supremum():
    p = PageParams(delta=1.5, lam=0.5, nu=0.4, mu_tilde=0.3)
    assert value_sup(p) == pytest.approx(0.3 / 1.5, rel=1e-12)
    assert crawl_value(200.0, p) == pytest.approx(0.2, rel=1e-9)


# ---------------------------------------------------------------- objectives

def test_G_examples():
    assert objective_G(1.0, 1.0, 1.0) == pytest.approx(1 - math.exp(-1))
    assert objective_G(np.inf, 0.3, 2.0) == 0.3
    assert objective_G(0.0, 0.3, 2.0) == 0.0
    xs = np.linspace(0.01, 20, 200)
    g = objective_G(xs, 0.5, 1.3)
    assert np.all(np.diff(g) > 0) and np.all(np.diff(g, 2) < 0)
    assert np.all((g >= 0) & (g <= 0.5))


@pytest.mark.parametrize("xi", [0.05, 0.4, 1.0, 3.0, 25.0])
def test_G_derivative_is_greedy_value(xi):
    mut, delta = 0.6, 1.7
    h = 1e-6 * xi
    fd = (objective_G(xi + h, mut, delta) - objective_G(xi - h, mut, delta)) / (2 * h)
    p = PageParams(delta=delta, mu_tilde=mut)
    assert fd == pytest.approx(crawl_value(1 / xi, p, GREEDY), rel=1e-6)


def test_o_reduces_to_G_without_signals():
    p = PageParams(delta=0.9, mu_tilde=0.7)
    for iota in [0.1, 1.0, 4.0]:
        assert objective_o(iota, p) == pytest.approx(objective_G(1 / iota, 0.7, 0.9), rel=1e-12)


def test_o_limits():
    p = PageParams(delta=1.0, lam=0.5, nu=0.5, mu_tilde=0.4)
    assert objective_o(np.inf, p) == 0.0
    assert objective_o(1e4, p) < 1e-3
    assert objective_o(1e-8, p) == pytest.approx(0.4, rel=1e-6)
    grid = np.linspace(0.1, 10, 50)
    o = objective_o(grid, p)
    assert np.all((o >= 0) & (o <= 0.4))
