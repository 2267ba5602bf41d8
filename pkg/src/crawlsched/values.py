"""Crawl-value functions for threshold policies on Poisson pages.

A page changes at rate ``delta``, is requested at rate ``mu`` and emits
change-indicating signals (CIS). Each change is signalled with probability
``lam``; spurious signals arrive at rate ``nu``. Everything a threshold policy
needs is a function of the effective elapsed time ``tau_eff = tau + beta * n``.

The numba kernels at the top are shared with the schedulers and the solver;
the public functions below them validate and broadcast their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np
from numba import njit

ALPHA_FLOOR = 1e-9
_SERIES_RTOL = 1e-17


class Kind(IntEnum):
    GREEDY = 0
    GREEDY_CIS = 1
    GREEDY_NCIS = 2
    APPROX = 3


@dataclass(frozen=True)
class Variant:
    """Which crawl-value function a policy uses.

    ``level`` is only meaningful for ``Kind.APPROX`` (number of series terms kept).
    """

    kind: Kind
    level: int = 0

    def __post_init__(self):
        if self.kind == Kind.APPROX and self.level < 1:
            raise ValueError("APPROX variant needs level >= 1")

    @classmethod
    def parse(cls, name: str | "Variant") -> "Variant":
        if isinstance(name, Variant):
            return name
        key = name.strip().lower().replace("_", "-")
        simple = {
            "greedy": Kind.GREEDY,
            "greedy-cis": Kind.GREEDY_CIS,
            "greedy-ncis": Kind.GREEDY_NCIS,
            "ncis": Kind.GREEDY_NCIS,
            "cis": Kind.GREEDY_CIS,
        }
        if key in simple:
            return cls(simple[key])
        for prefix in ("approx-", "g-ncis-approx-", "greedy-ncis-approx-"):
            if key.startswith(prefix):
                try:
                    level = int(key[len(prefix):])
                except ValueError:
                    break
                return cls(Kind.APPROX, level)
        raise ValueError(f"unknown value-function variant {name!r}")

    @property
    def label(self) -> str:
        if self.kind == Kind.APPROX:
            return f"G-NCIS-APPROX-{self.level}"
        return {Kind.GREEDY: "GREEDY", Kind.GREEDY_CIS: "GREEDY-CIS",
                Kind.GREEDY_NCIS: "GREEDY-NCIS"}[self.kind]

    @property
    def uses_cis(self) -> bool:
        return self.kind != Kind.GREEDY


GREEDY = Variant(Kind.GREEDY)
GREEDY_CIS = Variant(Kind.GREEDY_CIS)
GREEDY_NCIS = Variant(Kind.GREEDY_NCIS)


def approx(level: int) -> Variant:
    return Variant(Kind.APPROX, level)


def _derive_beta(delta, lam, nu):
    delta = np.asarray(delta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    nu = np.asarray(nu, dtype=float)
    alpha = np.maximum((1.0 - lam) * delta, ALPHA_FLOOR)
    gamma = lam * delta + nu
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.log(gamma / nu) / alpha
    beta = np.where(nu <= 0.0, np.inf, beta)
    beta = np.where((nu > 0.0) & (lam <= 0.0), 0.0, beta)
    return beta


@dataclass(frozen=True)
class PageParams:
    """Model parameters of a single page.

    ``mu_tilde`` is the request rate normalised over the page set the page
    belongs to; a lone page has ``mu_tilde = 1``.
    """

    delta: float
    mu: float = 1.0
    lam: float = 0.0
    nu: float = 0.0
    mu_tilde: float = 1.0

    def __post_init__(self):
        if not self.delta >= 0.0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if not self.mu >= 0.0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.nu >= 0.0:
            raise ValueError(f"nu must be >= 0, got {self.nu}")
        if not 0.0 <= self.mu_tilde <= 1.0:
            raise ValueError(f"mu_tilde must lie in [0, 1], got {self.mu_tilde}")

    @property
    def alpha(self) -> float:
        return (1.0 - self.lam) * self.delta

    @property
    def gamma(self) -> float:
        return self.lam * self.delta + self.nu

    @property
    def beta(self) -> float:
        return float(_derive_beta(self.delta, self.lam, self.nu))

    @property
    def precision(self) -> float:
        g = self.gamma
        return self.lam * self.delta / g if g > 0 else float("nan")

    @property
    def recall(self) -> float:
        return self.lam


class PageSet:
    """Parameters of a collection of pages, stored as arrays."""

    def __init__(self, delta, mu, lam=0.0, nu=0.0):
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        m = delta.size
        self.delta = delta
        self.mu = np.broadcast_to(np.asarray(mu, dtype=float), (m,)).copy()
        self.lam = np.broadcast_to(np.asarray(lam, dtype=float), (m,)).copy()
        self.nu = np.broadcast_to(np.asarray(nu, dtype=float), (m,)).copy()
        if m == 0:
            raise ValueError("page set is empty")
        if np.any(~(self.delta >= 0)) or np.any(~(self.mu >= 0)) or np.any(~(self.nu >= 0)):
            raise ValueError("rates must be nonnegative")
        if np.any((self.lam < 0) | (self.lam > 1)):
            raise ValueError("lam must lie in [0, 1]")
        total = self.mu.sum()
        if total <= 0:
            raise ValueError("at least one page needs a positive request rate")
        self.mu_tilde = self.mu / total
        self.alpha = (1.0 - self.lam) * self.delta
        self.gamma = self.lam * self.delta + self.nu
        self.beta = _derive_beta(self.delta, self.lam, self.nu)

    @classmethod
    def from_pages(cls, pages: Iterable[PageParams]) -> "PageSet":
        pages = list(pages)
        return cls([p.delta for p in pages], [p.mu for p in pages],
                   [p.lam for p in pages], [p.nu for p in pages])

    def __len__(self) -> int:
        return self.delta.size

    def __getitem__(self, i: int) -> PageParams:
        return PageParams(float(self.delta[i]), float(self.mu[i]), float(self.lam[i]),
                          float(self.nu[i]), float(self.mu_tilde[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def kernel_args(self, variant: Variant):
        """Arrays ``(mu_tilde, delta, nu, alpha, beta, gamma)`` as the variant believes them.

        GREEDY ignores signals altogether and GREEDY-CIS assumes they carry no
        false positives, so both see a reduced model.
        """
        return kernel_args(self, variant)


def as_pageset(pages) -> PageSet:
    if isinstance(pages, PageSet):
        return pages
    if isinstance(pages, PageParams):
        return PageSet.from_pages([pages])
    return PageSet.from_pages(pages)


def kernel_args(p, variant: Variant):
    delta = np.asarray(p.delta, dtype=float)
    lam = np.asarray(p.lam, dtype=float)
    nu = np.asarray(p.nu, dtype=float)
    mut = np.asarray(p.mu_tilde, dtype=float)
    if variant.kind == Kind.GREEDY:
        lam = np.zeros_like(lam)
        nu = np.zeros_like(nu)
    elif variant.kind == Kind.GREEDY_CIS:
        nu = np.zeros_like(nu)
    alpha = np.maximum((1.0 - lam) * delta, ALPHA_FLOOR)
    gamma = lam * delta + nu
    beta = _derive_beta(delta, lam, nu)
    return mut, delta, nu, alpha, beta, gamma


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _residual(i, x):
    """R^i(x) = P(i + 1, x), the regularised lower incomplete gamma."""
    if x <= 0.0:
        return 0.0
    if x <= i + 1.0:
        # tail e^-x sum_{j>i} x^j / j!; terms shrink since x/j < 1
        t = math.exp(-x + (i + 1) * math.log(x) - math.lgamma(i + 2.0))
        s = t
        j = i + 1
        while t > s * _SERIES_RTOL:
            j += 1
            t *= x / j
            s += t
        return s
    # 1 - e^-x sum_{j<=i} x^j / j!, summed from j = i downwards with compensation
    t = math.exp(-x + i * math.log(x) - math.lgamma(i + 1.0))
    s = 0.0
    c = 0.0
    j = i
    while True:
        y = t - c
        u = s + y
        c = (u - s) - y
        s = u
        if j == 0 or t <= s * _SERIES_RTOL:
            break
        t *= j / x
        j -= 1
    return 1.0 - s


@njit(cache=True)
def _series(tau, cap, nu, alpha, beta, gamma):
    """Cumulative freshness w and expected interval psi at threshold ``tau``.

    ``cap`` > 0 keeps only the first ``cap`` terms of both sums.
    """
    if tau <= 0.0:
        return 0.0, 0.0
    s = alpha + gamma
    if gamma <= 0.0:
        return -math.expm1(-s * tau) / s, tau
    if math.isinf(beta):
        kmax = 0
    elif beta <= 0.0:
        kmax = 1 << 62
    else:
        q = tau / beta
        kmax = 1 << 62 if q > 4.0e18 else int(math.floor(q))
    if cap > 0 and cap - 1 < kmax:
        kmax = cap - 1
    log_nu = math.log(nu) if nu > 0.0 else 0.0
    log_s = math.log(s)
    w = 0.0
    p = 0.0
    n = 0
    while n <= kmax:
        r = tau if n == 0 else tau - n * beta
        if r <= 0.0:
            break
        tw = math.exp(n * log_nu - (n + 1) * log_s) * _residual(n, s * r)
        tp = _residual(n, gamma * r) / gamma
        w += tw
        p += tp
        if n > 0 and tw <= _SERIES_RTOL * w and tp <= _SERIES_RTOL * p:
            break
        n += 1
    return w, p


@njit(cache=True)
def _value_sup(kind, level, mut, delta, nu, alpha, beta, gamma):
    if delta <= 0.0:
        return 0.0
    if kind != 3:
        return mut / delta
    s = alpha + gamma
    if math.isinf(beta) or gamma <= 0.0:
        return mut / s
    total = 0.0
    coef = 1.0 / s
    for _ in range(level):
        total += coef
        coef *= nu / s
    return mut * total


@njit(cache=True)
def _value_psi(kind, level, tau, mut, delta, nu, alpha, beta, gamma):
    """Crawl value V(tau) and the matching expected interval psi(tau)."""
    if tau <= 0.0:
        return 0.0, 0.0
    if math.isinf(tau):
        return _value_sup(kind, level, mut, delta, nu, alpha, beta, gamma), math.inf
    if delta <= 0.0:
        return 0.0, tau
    if kind == 0:
        return mut / delta * _residual(1, delta * tau), tau
    cap = level if kind == 3 else 0
    w, p = _series(tau, cap, nu, alpha, beta, gamma)
    return mut * (w - math.exp(-alpha * tau) * p), p


@njit(cache=True)
def _value(kind, level, tau, mut, delta, nu, alpha, beta, gamma):
    return _value_psi(kind, level, tau, mut, delta, nu, alpha, beta, gamma)[0]


@njit(cache=True)
def _values_array(kind, level, tau, mut, delta, nu, alpha, beta, gamma, out):
    for k in range(tau.size):
        out[k] = _value(kind, level, tau[k], mut[k], delta[k], nu[k], alpha[k], beta[k], gamma[k])


@njit(cache=True)
def _series_array(tau, cap, nu, alpha, beta, gamma, w_out, p_out):
    for k in range(tau.size):
        w, p = _series(tau[k], cap, nu[k], alpha[k], beta[k], gamma[k])
        w_out[k] = w
        p_out[k] = p


@njit(cache=True)
def _residual_array(i, x, out):
    for k in range(x.size):
        out[k] = _residual(i[k], x[k])


# --------------------------------------------------------------------------
# public functions


def _finish(out, shape, scalar):
    out = out.reshape(shape)
    return float(out) if scalar else out


def residual(i, x):
    """Normalised residual of the ``i``-th Taylor polynomial of exp at ``x``.

    Equals ``e^{-x} * sum_{j>i} x^j/j!``, i.e. the regularised lower incomplete
    gamma function P(i + 1, x). Broadcasts over array arguments.
    """
    scalar = np.ndim(i) == 0 and np.ndim(x) == 0
    i_arr, x_arr = np.broadcast_arrays(np.asarray(i), np.asarray(x, dtype=float))
    if np.any(i_arr < 0) or np.any(np.asarray(i_arr) != np.floor(i_arr)):
        raise ValueError("residual order must be a nonnegative integer")
    if np.any(~(x_arr >= 0)):
        raise ValueError("residual argument must be >= 0")
    shape = x_arr.shape
    out = np.empty(x_arr.size)
    _residual_array(i_arr.astype(np.int64).ravel(), x_arr.astype(float).ravel(), out)
    return _finish(out, shape, scalar)


def _broadcast(iota, p, variant: Variant):
    args = kernel_args(p, variant)
    iota = np.asarray(iota, dtype=float)
    if np.any(np.isnan(iota)) or np.any(iota < 0):
        raise ValueError("threshold must be >= 0")
    arrays = np.broadcast_arrays(iota, *args)
    shape = arrays[0].shape
    return shape, [np.ascontiguousarray(a, dtype=float).ravel() for a in arrays]


def _w_psi(iota, p, variant: Variant = GREEDY_NCIS):
    scalar = np.ndim(iota) == 0 and np.ndim(p.delta) == 0
    shape, (tau, mut, delta, nu, alpha, beta, gamma) = _broadcast(iota, p, variant)
    w = np.empty(tau.size)
    ps = np.empty(tau.size)
    finite = np.isfinite(tau)
    cap = variant.level if variant.kind == Kind.APPROX else 0
    _series_array(np.where(finite, tau, 0.0), cap, nu, alpha, beta, gamma, w, ps)
    # sum_n nu^n / (alpha + gamma)^(n+1) over all n is 1/delta
    with np.errstate(divide="ignore"):
        w_inf = np.where(delta > 0, 1.0 / delta, np.inf)
    w = np.where(finite, w, w_inf)
    ps = np.where(finite, ps, np.inf)
    return _finish(w, shape, scalar), _finish(ps, shape, scalar)


def psi(iota, p) -> float | np.ndarray:
    """Expected length of one crawl interval of the threshold policy at ``iota``."""
    return _w_psi(iota, p)[1]


def cum_freshness_w(iota, p) -> float | np.ndarray:
    """Expected time a page stays fresh within one crawl interval at ``iota``."""
    return _w_psi(iota, p)[0]


def frequency_f(iota, p) -> float | np.ndarray:
    """Crawl rate ``1 / psi(iota)`` of the threshold policy; zero at ``iota = inf``."""
    if np.any(np.asarray(iota, dtype=float) <= 0):
        raise ValueError("crawl frequency is unbounded at threshold 0")
    ps = psi(iota, p)
    with np.errstate(divide="ignore"):
        return 1.0 / ps


def crawl_value(iota, p, variant: Variant | str = GREEDY_NCIS) -> float | np.ndarray:
    """Crawl value V(iota) of a page under the given value-function variant.

    ``iota`` is the page's effective elapsed time (``inf`` after a signal under
    GREEDY-CIS). Broadcasts over ``iota`` and over array-valued parameters.
    """
    variant = Variant.parse(variant)
    scalar = np.ndim(iota) == 0 and np.ndim(p.delta) == 0
    shape, (tau, mut, delta, nu, alpha, beta, gamma) = _broadcast(iota, p, variant)
    out = np.empty(tau.size)
    _values_array(int(variant.kind), variant.level, tau, mut, delta, nu, alpha, beta, gamma, out)
    return _finish(out, shape, scalar)


def value_sup(p, variant: Variant | str = GREEDY_NCIS):
    """Limit of the crawl value as the effective time grows without bound."""
    return crawl_value(np.inf, p, variant)


def objective_G(xi, mu_tilde, delta):
    """Expected freshness contributed by a page crawled periodically at rate ``xi``."""
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise ValueError("crawl rate must be >= 0")
    mu_tilde = np.asarray(mu_tilde, dtype=float)
    delta = np.asarray(delta, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = delta / xi
        g = mu_tilde * -np.expm1(-x) / x
    g = np.where(xi <= 0, 0.0, g)
    g = np.where((xi > 0) & (delta <= 0), mu_tilde, g)
    g = np.where(np.isinf(xi), mu_tilde, g)
    return float(g) if g.ndim == 0 else g


def objective_o(iota, p):
    """Importance-weighted stationary freshness of the threshold policy at ``iota``.

    Tends to ``mu_tilde`` as ``iota -> 0`` and to 0 at ``iota = inf``.
    """
    w, ps = _w_psi(iota, p)
    iota = np.asarray(iota, dtype=float)
    mut = np.asarray(p.mu_tilde, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        o = mut * np.asarray(w) / np.asarray(ps)
    o = np.where(iota <= 0, mut * np.ones_like(o), o)
    o = np.where(np.isinf(iota), 0.0, o)
    return float(o) if o.ndim == 0 else o


__all__: Sequence[str] = [
    "Kind", "Variant", "GREEDY", "GREEDY_CIS", "GREEDY_NCIS", "approx",
    "PageParams", "PageSet", "as_pageset", "kernel_args",
    "residual", "psi", "cum_freshness_w", "frequency_f", "crawl_value", "value_sup",
    "objective_G", "objective_o", "ALPHA_FLOOR",
]
