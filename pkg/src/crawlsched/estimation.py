"""Estimating signal quality (precision and recall) from crawl histories.

Each crawl interval yields an observation ``(tau_elap, n_cis, z)``: its
length, the number of signals received in it and whether the content had
changed. Under the model the page is unchanged with probability
``exp(-(alpha * tau_elap + alpha * beta * n_cis))``. The fitted pair
``(alpha, alpha * beta)`` together with the directly observed signal rate
``gamma`` determines precision and recall.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class EstimationError(RuntimeError):
    pass


class InconsistentParameters(ValueError):
    pass


class MleConvergenceError(EstimationError):
    def __init__(self, msg, gradient_norm):
        super().__init__(f"{msg} (gradient sup-norm {gradient_norm:.3e})")
        self.gradient_norm = gradient_norm


@dataclass(frozen=True)
class IntervalObservation:
    tau_elap: float
    n_cis: int
    z: int

    def __post_init__(self):
        if not self.tau_elap > 0:
            raise ValueError("tau_elap must be positive")
        if self.n_cis < 0 or int(self.n_cis) != self.n_cis:
            raise ValueError("n_cis must be a nonnegative integer")
        if self.z not in (0, 1):
            raise ValueError("z must be 0 or 1")


@dataclass(frozen=True)
class CisQuality:
    """Precision and recall; either may be None when undefined."""

    precision: float | None
    recall: float | None

    def __post_init__(self):
        for name in ("precision", "recall"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def as_arrays(obs):
    """``(tau, n, z)`` arrays from observations or from an existing triple of arrays."""
    if isinstance(obs, tuple) and len(obs) == 3 and not isinstance(obs[0], IntervalObservation):
        tau, n, z = (np.asarray(a) for a in obs)
    else:
        obs = list(obs)
        tau = np.array([o.tau_elap for o in obs], dtype=float)
        n = np.array([o.n_cis for o in obs], dtype=np.int64)
        z = np.array([o.z for o in obs], dtype=np.int64)
    tau = tau.astype(float)
    n = n.astype(np.int64)
    z = z.astype(np.int64)
    if not (tau.shape == n.shape == z.shape) or tau.ndim != 1:
        raise ValueError("tau, n and z must be 1-D arrays of equal length")
    if np.any(~(tau > 0)) or np.any(n < 0) or np.any((z != 0) & (z != 1)):
        raise ValueError("invalid observations")
    return tau, n, z


# --------------------------------------------------------------------------
# naive counting


def estimate_naive(obs) -> CisQuality:
    """Counting estimator treating each crawl interval as a single event.

    precision = intervals with signal and change / intervals with signal;
    recall = intervals with signal and change / intervals with change.
    Biased, because one interval can hold several changes and signals.
    """
    tau, n, z = as_arrays(obs)
    if tau.size == 0:
        raise ValueError("no observations")
    sig = n > 0
    both = np.count_nonzero(sig & (z == 1))
    n_sig = np.count_nonzero(sig)
    n_chg = np.count_nonzero(z == 1)
    return CisQuality(both / n_sig if n_sig else None, both / n_chg if n_chg else None)


# --------------------------------------------------------------------------
# maximum likelihood


@dataclass
class MleFit:
    """Fitted ``alpha`` and ``beta``; ``gradient`` is the log-likelihood gradient
    with respect to ``(alpha, alpha * beta)`` at the returned point."""

    alpha: float
    beta: float
    alpha_beta: float
    loglik: float
    gradient: np.ndarray
    iterations: int
    warnings: list = field(default_factory=list)

    @property
    def gradient_norm(self) -> float:
        g = self.gradient[np.isfinite(self.gradient)]
        return float(np.max(np.abs(g))) if g.size else 0.0


def _fsum(x) -> float:
    return math.fsum(np.asarray(x, dtype=float).ravel())


def _loglik(theta, tau, n, z):
    """Log-likelihood, gradient and Hessian in ``theta = (alpha, alpha*beta)``."""
    eta = theta[0] * tau + theta[1] * n
    changed = z == 1
    # huge trial steps overflow to inf, whose limits below are correct
    with np.errstate(over="ignore"):
        em1 = np.expm1(eta[changed])
    if np.any(em1 <= 0):
        return -math.inf, None, None
    ll = _fsum(np.log(-np.expm1(-eta[changed]))) - _fsum(eta[~changed])
    # d ll / d eta and d2 ll / d eta2
    d1 = np.where(changed, 0.0, -1.0)
    d2 = np.zeros_like(eta)
    d1[changed] = 1.0 / em1
    d2[changed] = -(1.0 / em1) * (1.0 + 1.0 / em1)
    X = (tau, n.astype(float))
    g = np.array([_fsum(d1 * X[0]), _fsum(d1 * X[1])])
    H = np.array([[_fsum(d2 * X[0] * X[0]), _fsum(d2 * X[0] * X[1])],
                  [_fsum(d2 * X[0] * X[1]), _fsum(d2 * X[1] * X[1])]])
    return ll, g, H


def _newton(tau, n, z, theta, free, tol, max_iter):
    """Damped Newton ascent in log coordinates over the free components of ``theta``."""
    theta = np.array(theta, dtype=float)
    ll, g, H = _loglik(theta, tau, n, z)
    for it in range(1, max_iter + 1):
        # gradient and Hessian with respect to u = log(theta)
        gu = g * theta
        Hu = H * np.outer(theta, theta) + np.diag(gu)
        gf = gu[free]
        if np.max(np.abs(g[free])) <= tol:
            return theta, ll, g, it - 1
        Hf = Hu[np.ix_(free, free)]
        try:
            step = -np.linalg.solve(Hf, gf)
            if not np.all(np.isfinite(step)) or step @ gf <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = gf / max(1.0, np.max(np.abs(np.diag(Hf))))
        step = np.clip(step, -5.0, 5.0)
        t = 1.0
        while True:
            cand = theta.copy()
            cand[free] = theta[free] * np.exp(t * step)
            ll_new, g_new, H_new = _loglik(cand, tau, n, z)
            if ll_new >= ll - 1e-12 * abs(ll) or t < 1e-12:
                break
            t *= 0.5
        if g_new is None:
            break
        moved = np.any(cand != theta)
        theta, ll, g, H = cand, ll_new, g_new, H_new
        if not moved:
            break
    if np.max(np.abs(g[free])) <= tol:
        return theta, ll, g, max_iter
    raise MleConvergenceError("MLE did not converge", float(np.max(np.abs(g[free]))))


def _start(tau, n, z):
    """Moment-style start: overall change fraction matched by alpha alone."""
    frac = min(max(z.mean(), 1e-3), 1 - 1e-3)
    a = -math.log1p(-frac) / tau.mean()
    return np.array([a, a * max(tau.mean(), 1e-3)])


def fit_mle(obs, tol: float = 1e-10, max_iter: int = 200) -> MleFit:
    """Maximum-likelihood estimate of ``(alpha, beta)`` from interval observations.

    The change indicator satisfies P(z=1) = 1 - exp(-(alpha tau + alpha beta n)).
    Degenerate designs return boundary or partial estimates with a warning:
    no signals at all leave beta undetermined (nan); identical ``z`` puts the
    estimate on the boundary.
    """
    tau, n, z = as_arrays(obs)
    if tau.size < 2:
        raise ValueError("need at least two observations")
    notes = []

    def warn(msg):
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)

    if np.all(z == 0):
        warn("no interval shows a change; estimate at the boundary alpha = alpha*beta = 0")
        ll, g, _ = _loglik(np.zeros(2), tau, n, z)
        return MleFit(0.0, math.nan, 0.0, ll, g, 0, notes)
    if np.all(z == 1):
        warn("every interval shows a change; the likelihood increases without bound")
        return MleFit(math.inf, math.nan, math.inf, 0.0, np.zeros(2), 0, notes)

    if np.all(n == 0):
        warn("no signals observed; alpha*beta is not identifiable")
        theta, ll, g, it = _newton(tau, n, z, _start(tau, n, z) * [1, 0] + [0, 1.0], np.array([True, False]),
                                   tol, max_iter)
        return MleFit(float(theta[0]), math.nan, math.nan, ll, np.array([g[0], math.nan]), it, notes)

    theta, ll, g, it = _newton(tau, n, z, _start(tau, n, z), np.array([True, True]), tol, max_iter)
    # the log coordinates cannot reach alpha*beta = 0; check that boundary explicitly
    if theta[1] < 1e-8 and g[1] < 0:
        theta0, ll0, g0, it0 = _newton(tau, n, z, [theta[0], 0.0], np.array([True, False]), tol, max_iter)
        if ll0 >= ll:
            warn("alpha*beta at its lower bound 0: signals carry no information")
            theta, ll, g, it = theta0, ll0, g0, it + it0
    return MleFit(float(theta[0]), float(theta[1] / theta[0]), float(theta[1]), ll, g, it, notes)


# --------------------------------------------------------------------------
# parameter conversions


def params_to_quality(alpha: float, beta: float, gamma: float):
    """Convert ``(alpha, beta, gamma)`` to signal quality and ``(delta, lam, nu)``."""
    if not alpha > 0 or not beta >= 0 or not gamma > 0:
        raise InconsistentParameters("need alpha > 0, beta >= 0 and gamma > 0")
    nu = gamma * math.exp(-alpha * beta) if math.isfinite(beta) else 0.0
    true_rate = gamma - nu
    delta = alpha + true_rate
    lam = true_rate / delta
    precision = true_rate / gamma
    for name, v in (("lam", lam), ("precision", precision)):
        if not -1e-12 <= v <= 1 + 1e-12:
            raise InconsistentParameters(f"{name} = {v} outside [0, 1]")
    quality = CisQuality(min(max(precision, 0.0), 1.0), min(max(lam, 0.0), 1.0))
    return quality, (delta, lam, nu)


def quality_to_params(delta: float, precision: float, recall: float):
    """``(lam, nu)`` for a page with change rate ``delta`` and the given signal quality."""
    if not 0 < precision <= 1 or not 0 <= recall <= 1 or not delta > 0:
        raise InconsistentParameters("need delta > 0, 0 < precision <= 1, 0 <= recall <= 1")
    lam = recall
    nu = lam * delta * (1.0 / precision - 1.0)
    return lam, nu


def estimate_quality(obs, cis_count: int, horizon: float, tol: float = 1e-10):
    """MLE-based precision and recall; ``gamma`` is estimated as ``cis_count / horizon``.

    Returns ``(quality, fit)``.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    fit = fit_mle(obs, tol=tol)
    gamma = cis_count / horizon
    if not (math.isfinite(fit.alpha) and fit.alpha > 0 and gamma > 0 and math.isfinite(fit.beta)):
        return CisQuality(None, None), fit
    quality, _ = params_to_quality(fit.alpha, fit.beta, gamma)
    return quality, fit


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSetup:
    precision: float
    recall: float
    mean_change_interval: float
    crawl_factor: float
    horizon: float = 1e5

    @property
    def delta(self) -> float:
        return 1.0 / self.mean_change_interval

    @property
    def crawl_rate(self) -> float:
        return self.crawl_factor * self.delta

    def params(self):
        """``(delta, lam, nu, alpha, beta, gamma)`` of the generating model."""
        lam, nu = quality_to_params(self.delta, self.precision, self.recall)
        alpha = (1 - lam) * self.delta
        gamma = lam * self.delta + nu
        beta = -math.log(nu / gamma) / alpha if nu > 0 else math.inf
        return self.delta, lam, nu, alpha, beta, gamma


def sample_setup(rng: np.random.Generator, horizon: float = 1e5, precision_range=(0.2, 0.95),
                 recall_range=(0.2, 0.95), interval_range=(2.0, 20.0), factor_range=(0.25, 4.0)) -> SyntheticSetup:
    """Draw a random setup; the crawl-to-change rate factor is log-uniform."""
    p = rng.uniform(*precision_range)
    r = rng.uniform(*recall_range)
    L = rng.uniform(*interval_range)
    f = math.exp(rng.uniform(math.log(factor_range[0]), math.log(factor_range[1])))
    return SyntheticSetup(float(p), float(r), float(L), f, horizon)


def simulate_observations(setup: SyntheticSetup, rng: np.random.Generator):
    """Crawl the page at Poisson times over the horizon and record each interval.

    Returns ``((tau, n, z), cis_count)`` where ``cis_count`` counts every
    signal in ``[0, horizon]``, including the trailing partial interval.
    """
    delta, lam, nu, *_ = setup.params()
    T = setup.horizon
    k = rng.poisson(setup.crawl_rate * T)
    crawls = np.sort(rng.uniform(0.0, T, k))
    edges = np.concatenate([[0.0], crawls])
    tau = np.diff(edges)
    keep = tau > 0
    tau = tau[keep]
    changes = rng.poisson(delta * tau)
    true_sig = rng.binomial(changes, lam)
    false_sig = rng.poisson(nu * tau)
    n = true_sig + false_sig
    z = (changes > 0).astype(np.int64)
    tail = T - edges[-1]
    cis_count = int(n.sum() + rng.poisson((lam * delta + nu) * tail))
    return (tau, n.astype(np.int64), z), cis_count


# --------------------------------------------------------------------------
# ingestion


def read_observation_log(path):
    """Read ``tau_elap, n_cis, z`` records, one per line.

    Fields may be separated by commas or whitespace; blank lines and lines
    starting with ``#`` are skipped, as is a header line starting with ``tau``.
    """
    tau, n, z = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#") or (lineno == 1 and s.lower().startswith("tau")):
                continue
            parts = [p for p in s.replace(",", " ").split() if p]
            try:
                if len(parts) != 3:
                    raise ValueError
                ob = IntervalObservation(float(parts[0]), int(parts[1]), int(parts[2]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'tau_elap, n_cis, z', got {s!r}") from None
            tau.append(ob.tau_elap)
            n.append(ob.n_cis)
            z.append(ob.z)
    return np.array(tau, dtype=float), np.array(n, dtype=np.int64), np.array(z, dtype=np.int64)


def observations_from_trace(trace, log, page: int, delayed: bool = False):
    """Interval observations of one page from a simulated or imported trace.

    Intervals run between consecutive crawls, the first starting at time 0.
    Returns ``((tau, n, z), cis_count)`` with ``cis_count`` over the whole trace.
    """
    c = np.concatenate([[0.0], log.per_page().page(page)])
    c = c[np.concatenate([[True], np.diff(c) > 0])]
    t, p, _ = trace.cis_arrivals(delayed)
    cis = t[p == page]
    ch = trace.changes.page(page)
    n = np.diff(np.searchsorted(cis, c, side="right"))
    z = (np.diff(np.searchsorted(ch, c, side="right")) > 0).astype(np.int64)
    return (np.diff(c), n.astype(np.int64), z), int(cis.size)
