"""Optimal continuous crawl policies under a bandwidth budget.

Both solvers equalise the crawl value of every crawled page at a common
Lagrange multiplier and pick the multiplier so that the crawl rates add up to
the budget. ``solve_no_cis`` works directly on rates with a closed-form inner
step; ``solve_kkt`` handles every value-function variant through nested
bisections on thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import lambertw

from .values import (
    GREEDY,
    Kind,
    Variant,
    _residual,
    _series,
    _value_psi,
    _value_sup,
    as_pageset,
    kernel_args,
    objective_G,
)

IOTA_MIN = 1e-9
MAX_OUTER = 400


class SolverError(RuntimeError):
    pass


class SaturationError(SolverError):
    """The budget exceeds what crawling every page at the smallest threshold uses."""


class ConvergenceError(SolverError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


@dataclass
class ContinuousSolution:
    lambda_mult: float
    iotas: np.ndarray
    rates: np.ndarray
    achieved_bandwidth: float
    objective: float
    variant: Variant
    bandwidth: float
    min_rate: float = 0.0

    @property
    def excluded(self) -> np.ndarray:
        return np.isinf(self.iotas)


# --------------------------------------------------------------------------
# no-signal case on rates


@njit(cache=True)
def _polish_r1(c, x):
    """Newton steps on R^1(x) = c starting from ``x``."""
    for k in range(c.size):
        xk = x[k]
        for _ in range(8):
            if xk <= 0.0:
                break
            slope = xk * math.exp(-xk)
            if slope <= 0.0:
                break
            step = (_residual(1, xk) - c[k]) / slope
            xk -= step
            if abs(step) <= 1e-16 * xk:
                break
        x[k] = xk


def _rates_for_multiplier(lam_mult, mut, delta):
    """Rates with (mut/delta) R^1(delta/xi) = lam_mult, or 0 where unreachable."""
    xi = np.zeros_like(delta)
    if lam_mult <= 0:
        xi[:] = np.inf
        xi[(delta <= 0) | (mut <= 0)] = 0.0
        return xi
    with np.errstate(divide="ignore", invalid="ignore"):
        c = lam_mult * delta / mut
    live = (delta > 0) & (mut > 0) & (c < 1.0)
    if not np.any(live):
        return xi
    cl = c[live]
    # R^1(x) = c  <=>  (1 + x) e^{-(1+x)} = (1 - c)/e, on the lower branch
    x = -1.0 - lambertw(-(1.0 - cl) / math.e, -1).real
    x = np.where(np.isfinite(x) & (x > 0), x, np.sqrt(2.0 * cl))
    _polish_r1(np.ascontiguousarray(cl), x)
    xi[live] = delta[live] / x
    return xi


def _outer_search(rates_at, budget, hi, tol):
    """Bisect the multiplier until the rates returned by ``rates_at`` sum to ``budget``.

    Returns ``(multiplier, rates)``. Rates of pages sitting exactly on their
    exclusion boundary can jump (or, in floating point, stall) as the
    multiplier moves by one ulp; when the bracket collapses, those pages take
    the share of the budget left over, interpolated between the two ends.
    Their marginal value equals the multiplier to machine precision along
    that segment, so stationarity is kept.
    """
    lo = 0.0
    r_hi = rates_at(hi)
    if r_hi.sum() >= budget:
        return hi, r_hi
    r_lo = None
    for _ in range(MAX_OUTER):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        r = rates_at(mid)
        s = r.sum()
        if abs(s - budget) <= tol * budget:
            return mid, r
        if s > budget:
            lo, r_lo = mid, r
        else:
            hi, r_hi = mid, r
    if r_lo is None:
        r_lo = rates_at(lo)
    s_lo, s_hi = r_lo.sum(), r_hi.sum()
    if not s_lo > budget > s_hi:
        resid = min(abs(s_lo - budget), abs(s_hi - budget)) / budget
        raise ConvergenceError("multiplier search did not converge", resid)
    q = (budget - s_hi) / (s_lo - s_hi)
    return hi, r_hi + q * (r_lo - r_hi)


def solve_no_cis(pages, R: float, tol: float = 1e-12, min_rate: float = 0.0) -> ContinuousSolution:
    """Optimal periodic crawl rates ignoring signals (the continuous baseline).

    Maximises ``sum_i G(xi_i)`` subject to ``sum_i xi_i = R``. With ``min_rate``
    every page gets at least that rate.
    """
    ps = as_pageset(pages)
    if not R > 0:
        raise ValueError("bandwidth must be positive")
    mut, delta = ps.mu_tilde, ps.delta
    clamped = np.zeros(len(ps), dtype=bool)
    while True:
        free = ~clamped
        budget = R - min_rate * clamped.sum()
        if budget <= 0:
            raise SolverError("rate floor exhausts the bandwidth")
        with np.errstate(divide="ignore"):
            ratio = np.where(delta[free] > 0, mut[free] / delta[free], 0.0)
        hi = float(ratio.max()) if ratio.size else 0.0
        if hi <= 0:
            raise SolverError("no page benefits from crawling")

        def rates_at(lm, mut_f=mut[free], delta_f=delta[free]):
            return _rates_for_multiplier(lm, mut_f, delta_f)

        lam_mult, xi_free = _outer_search(rates_at, budget, hi, tol)
        xi = np.full(len(ps), min_rate)
        xi[free] = xi_free
        newly = free & (xi < min_rate)
        if min_rate <= 0 or not newly.any():
            break
        clamped |= newly
    with np.errstate(divide="ignore"):
        iotas = np.where(xi > 0, 1.0 / xi, np.inf)
    obj = float(np.sum(objective_G(xi, mut, delta)))
    return ContinuousSolution(lam_mult, iotas, xi, float(xi.sum()), obj, GREEDY, R, min_rate)


# --------------------------------------------------------------------------
# general case on thresholds


@njit(cache=True)
def _thresholds_for_multiplier(lam_mult, kind, level, mut, delta, nu, alpha, beta, gamma,
                               skip, iotas, rates):
    for k in range(mut.size):
        if skip[k]:
            continue
        sup = _value_sup(kind, level, mut[k], delta[k], nu[k], alpha[k], beta[k], gamma[k])
        if sup <= lam_mult:
            iotas[k] = math.inf
            rates[k] = 0.0
            continue
        lo = 0.0
        hi = 1.0
        while _value_psi(kind, level, hi, mut[k], delta[k], nu[k], alpha[k], beta[k], gamma[k])[0] < lam_mult:
            lo = hi
            hi *= 2.0
            if hi > 1e300:
                break
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            v = _value_psi(kind, level, mid, mut[k], delta[k], nu[k], alpha[k], beta[k], gamma[k])[0]
            if v < lam_mult:
                lo = mid
            else:
                hi = mid
        iota = max(hi, IOTA_MIN)
        iotas[k] = iota
        rates[k] = 1.0 / _psi_variant(kind, level, iota, delta[k], nu[k], alpha[k], beta[k], gamma[k])


@njit(cache=True)
def _psi_variant(kind, level, iota, delta, nu, alpha, beta, gamma):
    if math.isinf(iota):
        return math.inf
    if kind == 0:
        return iota
    cap = level if kind == 3 else 0
    return _series(iota, cap, nu, alpha, beta, gamma)[1]


def _psi_of(variant: Variant, iota, args):
    mut, delta, nu, alpha, beta, gamma = args
    return _psi_variant(int(variant.kind), variant.level, float(iota), float(delta),
                        float(nu), float(alpha), float(beta), float(gamma))


def _invert_psi(variant, target, args):
    """Threshold at which the variant's expected interval equals ``target``.

    Returns infinity when the expected interval stays below ``target`` for
    every threshold (bounded when all signals are believed true).
    """
    lo, hi = 0.0, max(target, 1.0)
    prev = 0.0
    while (cur := _psi_of(variant, hi, args)) < target:
        if cur - prev <= 1e-15 * cur:
            return math.inf
        prev = cur
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _psi_of(variant, mid, args) < target:
            lo = mid
        else:
            hi = mid
    return hi


def _threshold_for_rate(variant, rate, args):
    if rate <= 0:
        return math.inf
    return _invert_psi(variant, 1.0 / rate, args)


def solve_kkt(pages, R: float, variant: Variant | str = "greedy-ncis", tol: float = 1e-12,
              min_rate: float = 0.0) -> ContinuousSolution:
    """Optimal threshold policy for the chosen value-function variant.

    Outer bisection on the multiplier, inner bisection on each page's threshold
    so that its crawl value equals the multiplier. Pages whose value never
    reaches the multiplier are left uncrawled (infinite threshold).
    """
    ps = as_pageset(pages)
    variant = Variant.parse(variant)
    if not R > 0:
        raise ValueError("bandwidth must be positive")
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    args = [np.ascontiguousarray(a, dtype=float) for a in kernel_args(ps, variant)]
    m = len(ps)
    kind, level = int(variant.kind), variant.level
    sups = np.array([_value_sup(kind, level, *(a[k] for a in args)) for k in range(m)])
    clamped = np.zeros(m, dtype=bool)
    iotas = np.empty(m)
    rates = np.empty(m)
    while True:
        budget = R - min_rate * clamped.sum()
        if budget <= 0:
            raise SolverError("rate floor exhausts the bandwidth")

        def rates_at(lm):
            _thresholds_for_multiplier(lm, kind, level, *args, clamped, iotas, rates)
            return rates[~clamped].copy()

        # a zero multiplier puts every page at the smallest threshold
        if rates_at(0.0).sum() < budget:
            raise SaturationError(f"bandwidth {R} exceeds achievable total rate")
        hi = float(sups[~clamped].max())
        lam_mult, free_rates = _outer_search(rates_at, budget, hi, tol)
        rates_at(lam_mult)
        free = np.flatnonzero(~clamped)
        for k in free[free_rates != rates[free]]:
            # boundary pages from an interpolated fill
            rates[k] = free_rates[np.searchsorted(free, k)]
            iotas[k] = _threshold_for_rate(variant, rates[k], [a[k] for a in args])
        if min_rate <= 0:
            break
        newly = ~clamped & (rates < min_rate)
        if not newly.any():
            break
        for k in np.flatnonzero(newly):
            page_args = [a[k] for a in args]
            iotas[k] = _threshold_for_rate(variant, min_rate, page_args)
            rates[k] = min_rate
        clamped |= newly
    sol_iotas = iotas.copy()
    sol_rates = rates.copy()
    obj = _objective_from_thresholds(variant, sol_iotas, args, sol_rates)
    return ContinuousSolution(lam_mult, sol_iotas, sol_rates, float(sol_rates.sum()), obj,
                              variant, R, min_rate)


def _objective_from_thresholds(variant: Variant, iotas, args, rates=None) -> float:
    mut, delta, nu, alpha, beta, gamma = args
    total = 0.0
    cap = variant.level if variant.kind == Kind.APPROX else 0
    for k in range(iotas.size):
        it = iotas[k]
        if math.isinf(it):
            # crawling on a fraction of signals only: value per crawl is the sup
            if rates is not None and rates[k] > 0:
                total += rates[k] * _value_sup(int(variant.kind), variant.level, mut[k], delta[k],
                                               nu[k], alpha[k], beta[k], gamma[k])
            continue
        if variant.kind == Kind.GREEDY:
            total += float(objective_G(1.0 / it, mut[k], delta[k]))
            continue
        w, p = _series(it, cap, nu[k], alpha[k], beta[k], gamma[k])
        total += mut[k] * w / p
    return total


def continuous_accuracy(solution: ContinuousSolution, pages) -> float:
    """Fraction of requests served fresh by a continuous policy, in expectation."""
    ps = as_pageset(pages)
    if solution.variant.kind == Kind.GREEDY:
        return float(np.sum(objective_G(solution.rates, ps.mu_tilde, ps.delta)) / ps.mu_tilde.sum())
    args = [np.asarray(a, dtype=float) for a in kernel_args(ps, solution.variant)]
    return _objective_from_thresholds(solution.variant, solution.iotas, args,
                                      solution.rates) / ps.mu_tilde.sum()


def baseline_accuracy(pages, R: float) -> float:
    """Accuracy of the optimal continuous policy that ignores signals."""
    ps = as_pageset(pages)
    return continuous_accuracy(solve_no_cis(ps, R), ps)
