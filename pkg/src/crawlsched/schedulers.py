"""Discrete crawl schedulers: greedy argmax, low-discrepancy rate tracking.

The greedy scheduler crawls, at every tick, the page with the largest crawl
value at its current effective elapsed time. In lazy mode a page is only
re-evaluated when an upper bound on its value reaches the running maximum.
The bound follows from ``V'(tau) = mu * alpha * e^{-alpha tau} * psi(tau)``
with ``psi' <= 1``: after an exact evaluation at ``tau0``,

    V(tau0 + x) <= V(tau0) + mu * alpha * e^{-alpha tau0} * (psi(tau0) x + x^2 / 2).

It is a bound in effective time, so it stays valid when a signal makes the
effective time jump by beta; only a crawl resets it. Skipped pages are
strictly below the winning value, so lazy and exact mode make bit-identical
decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .values import GREEDY_NCIS, PageParams, PageSet, Variant, _value_psi, _value_sup, as_pageset, kernel_args

# float slack on the value bound; series values carry ~1e-15 relative error
BOUND_SLACK = 1e-10

# columns of the parameter matrix
_MUT, _DELTA, _NU, _ALPHA, _BETA, _GAMMA, _SUP = range(7)
# columns of the bound matrix
_TAU0, _V0, _C0, _PSI0 = range(4)


@dataclass
class PageState:
    last_crawl: float = 0.0
    cis_count: int = 0

    def tau_elap(self, t: float) -> float:
        return t - self.last_crawl

    def tau_eff(self, t: float, beta: float) -> float:
        if self.cis_count == 0:
            return self.tau_elap(t)
        return self.tau_elap(t) + beta * self.cis_count


@dataclass
class SchedulerConfig:
    bandwidth: float
    variant: Variant = GREEDY_NCIS
    tie_break: str = "lowest-index"
    delay_window: float = 0.0
    index_mode: str = "lazy"

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.delay_window >= 0:
            raise ValueError("delay window must be >= 0")
        if self.index_mode not in ("exact", "lazy"):
            raise ValueError(f"unknown index mode {self.index_mode!r}")
        if self.tie_break != "lowest-index":
            raise ValueError("only lowest-index tie breaking is supported")


# --------------------------------------------------------------------------
# kernels shared with the simulator


def param_matrix(ps: PageSet, variant: Variant) -> np.ndarray:
    mut, delta, nu, alpha, beta, gamma = (np.asarray(a, dtype=float) for a in kernel_args(ps, variant))
    kind, level = int(variant.kind), variant.level
    sup = np.array([_value_sup(kind, level, mut[k], delta[k], nu[k], alpha[k], beta[k], gamma[k])
                    for k in range(len(ps))])
    return np.ascontiguousarray(np.stack([mut, delta, nu, alpha, beta, gamma, sup], axis=1))


@njit(cache=True)
def _tau_eff(kind, t, last, n, beta):
    tau = t - last
    if kind == 0 or n == 0:
        return tau
    if kind == 1 or math.isinf(beta):
        return math.inf
    return tau + beta * n


@njit(cache=True)
def _evaluate(k, t, kind, level, par, last, ncis, bnd, dirty, evals):
    tau = _tau_eff(kind, t, last[k], ncis[k], par[k, _BETA])
    v, ps = _value_psi(kind, level, tau, par[k, _MUT], par[k, _DELTA], par[k, _NU],
                       par[k, _ALPHA], par[k, _BETA], par[k, _GAMMA])
    bnd[k, _TAU0] = tau
    bnd[k, _V0] = v
    if math.isinf(tau):
        bnd[k, _C0] = 0.0
        bnd[k, _PSI0] = 0.0
    else:
        bnd[k, _C0] = par[k, _MUT] * par[k, _ALPHA] * math.exp(-par[k, _ALPHA] * tau)
        bnd[k, _PSI0] = ps
    dirty[k] = False
    evals[k] += 1
    return v


@njit(cache=True)
def _upper(t, kind, last, n, beta, sup, tau0, v0, c0, psi0):
    # scalar arguments only: passing arrays to a non-inlined call costs more than the bound
    x = _tau_eff(kind, t, last, n, beta) - tau0
    if math.isinf(x):
        ub = sup
    else:
        ub = v0 + c0 * (psi0 * x + 0.5 * x * x)
        if ub > sup:
            ub = sup
    return ub * (1.0 + BOUND_SLACK) + 1e-300


@njit(cache=True)
def _greedy_tick(t, kind, level, lazy, par, last, ncis, bnd, dirty, evals, ub):
    m = last.size
    best = -1.0
    arg = -1
    if not lazy:
        for k in range(m):
            v = _evaluate(k, t, kind, level, par, last, ncis, bnd, dirty, evals)
            if v > best:
                best = v
                arg = k
    else:
        top = 0
        for k in range(m):
            if dirty[k]:
                ub[k] = math.inf
            else:
                ub[k] = _upper(t, kind, last[k], ncis[k], par[k, _BETA], par[k, _SUP],
                               bnd[k, _TAU0], bnd[k, _V0], bnd[k, _C0], bnd[k, _PSI0])
            if ub[k] > ub[top]:
                top = k
        best = _evaluate(top, t, kind, level, par, last, ncis, bnd, dirty, evals)
        arg = top
        for k in range(m):
            if k == top or ub[k] < best:
                continue
            v = _evaluate(k, t, kind, level, par, last, ncis, bnd, dirty, evals)
            if v > best or (v == best and k < arg):
                best = v
                arg = k
    last[arg] = t
    ncis[arg] = 0
    # fresh crawl: V(0) = 0, V'(0) = 0, psi(0) = 0
    bnd[arg, _TAU0] = 0.0
    bnd[arg, _V0] = 0.0
    bnd[arg, _C0] = par[arg, _MUT] * par[arg, _ALPHA]
    bnd[arg, _PSI0] = 0.0
    dirty[arg] = False
    return arg


@njit(cache=True)
def _ingest_cis(k, t, kind, delay_window, last, ncis, dirty):
    if delay_window > 0.0 and t - last[k] <= delay_window:
        return False
    ncis[k] += 1
    return True


@njit(cache=True)
def _run_greedy(ticks, cis_time, cis_page, kind, level, lazy, delay_window,
                par, last, ncis, bnd, dirty, evals):
    """Drive the greedy scheduler over precomputed ticks and signal arrivals.

    Signals at a tick's timestamp are ingested before the tick. Returns the
    crawled page per tick and the number of signals kept by the delay filter.
    """
    out = np.empty(ticks.size, dtype=np.int64)
    ub = np.empty(last.size)
    ci = 0
    kept = 0
    for j in range(ticks.size):
        t = ticks[j]
        while ci < cis_time.size and cis_time[ci] <= t:
            if _ingest_cis(cis_page[ci], cis_time[ci], kind, delay_window, last, ncis, dirty):
                kept += 1
            ci += 1
        out[j] = _greedy_tick(t, kind, level, lazy, par, last, ncis, bnd, dirty, evals, ub)
    return out, kept


def initial_state(m: int, start: float = 0.0):
    last = np.full(m, float(start))
    ncis = np.zeros(m, dtype=np.int64)
    bnd = np.zeros((m, 4))
    dirty = np.ones(m, dtype=bool)
    evals = np.zeros(m, dtype=np.int64)
    return last, ncis, bnd, dirty, evals


# --------------------------------------------------------------------------
# stepwise scheduler


class GreedyScheduler:
    """Greedy argmax scheduler driven one event at a time.

    Ticks must be fed in nondecreasing time order, interleaved with signal
    arrivals via :meth:`on_cis`.
    """

    def __init__(self, pages, config: SchedulerConfig, start_time: float = 0.0):
        self.config = config
        self._pages = list(as_pageset(pages))
        if not self._pages:
            raise ValueError("page set is empty")
        m = len(self._pages)
        self._last, self._ncis, self._bnd, self._dirty, self._evals = initial_state(m, start_time)
        self._rebuild()

    def _rebuild(self):
        ps = PageSet.from_pages(self._pages)
        self._pageset = ps
        self._par = param_matrix(ps, self.config.variant)
        # normalisation changed: every stored bound is stale
        self._dirty[:] = True
        self._ub = np.empty(len(ps))

    @property
    def pages(self) -> PageSet:
        return self._pageset

    @property
    def eval_counts(self) -> np.ndarray:
        return self._evals.copy()

    def state(self, i: int) -> PageState:
        return PageState(float(self._last[i]), int(self._ncis[i]))

    @property
    def states(self) -> list[PageState]:
        return [self.state(i) for i in range(len(self._last))]

    def values(self, t: float) -> np.ndarray:
        """Exact crawl values of all pages at time ``t`` (no side effects)."""
        kind, level = int(self.config.variant.kind), self.config.variant.level
        out = np.empty(len(self._last))
        for k in range(out.size):
            p = self._par[k]
            tau = _tau_eff(kind, t, self._last[k], self._ncis[k], p[_BETA])
            out[k] = _value_psi(kind, level, tau, p[_MUT], p[_DELTA], p[_NU], p[_ALPHA], p[_BETA], p[_GAMMA])[0]
        return out

    def on_cis(self, page: int, t: float) -> bool:
        """Register a signal; returns False when the delay filter discards it."""
        if t < self._last[page]:
            raise ValueError("signal precedes the page's last crawl")
        return bool(_ingest_cis(page, t, int(self.config.variant.kind), self.config.delay_window,
                                self._last, self._ncis, self._dirty))

    def step(self, t: float) -> int:
        """Crawl the page with the largest value at tick ``t``; returns its index."""
        kind, level = int(self.config.variant.kind), self.config.variant.level
        lazy = self.config.index_mode == "lazy"
        return int(_greedy_tick(float(t), kind, level, lazy, self._par, self._last, self._ncis,
                                self._bnd, self._dirty, self._evals, self._ub))

    def add_page(self, params: PageParams, t: float) -> int:
        """Register a new page whose clock starts at its arrival time ``t``."""
        self._pages.append(params)
        self._last = np.append(self._last, float(t))
        self._ncis = np.append(self._ncis, 0)
        self._bnd = np.vstack([self._bnd, np.zeros((1, 4))])
        self._dirty = np.append(self._dirty, True)
        self._evals = np.append(self._evals, 0)
        self._rebuild()
        return len(self._pages) - 1


def greedy_step(t: float, states: list[PageState], params, variant: Variant | str = GREEDY_NCIS) -> int:
    """One exact greedy decision: argmax of the crawl value, lowest index on ties.

    The chosen page's state is reset in place.
    """
    ps = as_pageset(params)
    if len(states) == 0:
        raise ValueError("page set is empty")
    if len(states) != len(ps):
        raise ValueError("states and params differ in length")
    variant = Variant.parse(variant)
    par = param_matrix(ps, variant)
    last = np.array([s.last_crawl for s in states], dtype=float)
    ncis = np.array([s.cis_count for s in states], dtype=np.int64)
    _, _, bnd, dirty, evals = initial_state(len(states))
    k = int(_greedy_tick(float(t), int(variant.kind), variant.level, False, par, last, ncis,
                         bnd, dirty, evals, np.empty(len(states))))
    states[k].last_crawl = float(t)
    states[k].cis_count = 0
    return k


# --------------------------------------------------------------------------
# low-discrepancy rate tracking


@njit(cache=True)
def _lds(share, n):
    m = share.size
    c = 1.0 - 1.0 / (2.0 * m - 2.0) if m > 1 else 0.0
    count = np.zeros(m)
    out = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        arg = -1
        best = math.inf
        deficit_arg = 0
        deficit_best = -math.inf
        for k in range(m):
            if share[k] <= 0.0:
                continue
            d = share[k] * j - count[k]
            if d > deficit_best:
                deficit_best = d
                deficit_arg = k
            if d >= 1.0 - c:
                deadline = (count[k] + c) / share[k]
                if deadline < best:
                    best = deadline
                    arg = k
        if arg < 0:
            # only reachable through rounding; fall back to the largest deficit
            arg = deficit_arg
        count[arg] += 1.0
        out[j - 1] = arg
    return out


def lds_schedule(rates, n_ticks: int, bandwidth: float | None = None, rtol: float = 1e-6) -> np.ndarray:
    """Crawl sequence of ``n_ticks`` ticks whose per-page counts track ``rates``.

    Uses Tijdeman's earliest-deadline rule among pages whose crawl deficit is
    at least ``1/(2m-2)``; every page's count stays within ``1 - 1/(2m-2)``
    of ``rates_i * j / R`` after every tick ``j``.
    """
    rates = np.asarray(rates, dtype=float)
    if rates.ndim != 1 or rates.size == 0:
        raise ValueError("rates must be a nonempty vector")
    if np.any(rates < 0) or not np.all(np.isfinite(rates)):
        raise ValueError("rates must be finite and nonnegative")
    total = rates.sum()
    if bandwidth is not None and abs(total - bandwidth) > rtol * bandwidth:
        raise ValueError(f"rates sum to {total}, expected bandwidth {bandwidth}")
    if total <= 0:
        raise ValueError("rates must not all be zero")
    return _lds(rates / total, int(n_ticks))
