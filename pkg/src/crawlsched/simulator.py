"""Monte-Carlo environment for crawl policies.

A replication samples page parameters, generates Poisson change, request and
signal streams, lets each policy produce a crawl log on the same trace, and
scores the log by the fraction of requests that found a fresh copy.

Ordering at equal timestamps is change < signal < request < crawl: a request
at a change instant sees the change, and a crawl sees every signal up to it.
Scoring is done after the fact from sorted streams, which is equivalent to a
time-ordered event queue under that ordering.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from numba import njit

from .schedulers import _run_greedy, initial_state, lds_schedule, param_matrix
from .solver import continuous_accuracy, solve_no_cis
from .values import PageSet, Variant, as_pageset, kernel_args

WORKERS_ENV = "CRAWLSCHED_WORKERS"


# --------------------------------------------------------------------------
# bandwidth schedule


@dataclass(frozen=True)
class BandwidthSchedule:
    """Piecewise-constant crawl rate; ``segments`` holds ``(start_time, rate)`` pairs."""

    segments: tuple

    def __post_init__(self):
        segs = tuple((float(s), float(r)) for s, r in self.segments)
        if not segs or segs[0][0] != 0.0:
            raise ValueError("bandwidth schedule must start at time 0")
        if any(r <= 0 or not math.isfinite(r) for _, r in segs):
            raise ValueError("bandwidth must be positive")
        if any(b[0] <= a[0] for a, b in zip(segs, segs[1:])):
            raise ValueError("schedule change times must increase")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def constant(cls, rate: float) -> "BandwidthSchedule":
        return cls(((0.0, rate),))

    @classmethod
    def coerce(cls, value) -> "BandwidthSchedule":
        if isinstance(value, BandwidthSchedule):
            return value
        if np.ndim(value) == 0:
            return cls.constant(float(value))
        return cls(tuple(tuple(seg) for seg in value))

    @property
    def is_constant(self) -> bool:
        return len(self.segments) == 1

    @property
    def initial_rate(self) -> float:
        return self.segments[0][1]

    def rate_at(self, t: float) -> float:
        rate = self.segments[0][1]
        for s, r in self.segments:
            if t >= s:
                rate = r
        return rate

    def ticks(self, horizon: float) -> np.ndarray:
        """Tick times in (0, horizon]; each segment restarts its grid at its start time."""
        out = []
        bounds = [s for s, _ in self.segments[1:]] + [horizon]
        for (start, rate), end in zip(self.segments, bounds):
            end = min(end, horizon)
            if end <= start:
                continue
            n = int(math.floor((end - start) * rate + 1e-9))
            out.append(start + np.arange(1, n + 1) / rate)
        return np.concatenate(out) if out else np.empty(0)


# --------------------------------------------------------------------------
# instances and traces


@dataclass
class InstanceSpec:
    """Distributions of page parameters plus horizon, bandwidth and signal delays.

    ``lam_a``/``lam_b`` set a Beta law for the recall; when unset every page
    has recall ``lam``. ``delay_law`` is ``None``, ``"poisson"`` or
    ``"exponential"`` with mean ``delay_mean`` in units of ``delay_unit``.
    """

    m: int = 100
    horizon: float = 1000.0
    bandwidth: object = 100.0
    delta_range: tuple = (0.0, 1.0)
    mu_range: tuple = (0.0, 1.0)
    lam: float = 0.0
    lam_a: float | None = None
    lam_b: float | None = None
    nu_min: float = 0.0
    nu_max: float = 0.0
    delay_law: str | None = None
    delay_mean: float = 0.0
    delay_unit: float = 1.0

    def __post_init__(self):
        self.bandwidth = BandwidthSchedule.coerce(self.bandwidth)
        if self.m < 1:
            raise ValueError("need at least one page")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        for lo, hi in (self.delta_range, self.mu_range, (self.nu_min, self.nu_max)):
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid range [{lo}, {hi}]")
        if (self.lam_a is None) != (self.lam_b is None):
            raise ValueError("lam_a and lam_b go together")
        if self.lam_a is not None and (self.lam_a <= 0 or self.lam_b <= 0):
            raise ValueError("Beta parameters must be positive")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.delay_law not in (None, "poisson", "exponential"):
            raise ValueError(f"unknown delay law {self.delay_law!r}")
        if self.delay_mean < 0 or self.delay_unit <= 0:
            raise ValueError("invalid delay parameters")

    def sample_pages(self, rng: np.random.Generator) -> PageSet:
        m = self.m
        delta = rng.uniform(*self.delta_range, m)
        mu = rng.uniform(*self.mu_range, m)
        lam = rng.beta(self.lam_a, self.lam_b, m) if self.lam_a is not None else np.full(m, self.lam)
        nu = rng.uniform(self.nu_min, self.nu_max, m)
        return PageSet(delta, mu, lam, nu)


@dataclass(frozen=True)
class Csr:
    """Per-page sorted event times in compressed-row layout."""

    times: np.ndarray
    offsets: np.ndarray

    def page(self, k: int) -> np.ndarray:
        return self.times[self.offsets[k]:self.offsets[k + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def page_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.offsets.size - 1), self.counts())

    @classmethod
    def from_events(cls, times, pages, m: int) -> "Csr":
        times = np.asarray(times, dtype=float)
        pages = np.asarray(pages, dtype=np.int64)
        order = np.lexsort((times, pages))
        counts = np.bincount(pages, minlength=m)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(np.ascontiguousarray(times[order]), offsets)


@dataclass(frozen=True)
class EventTrace:
    """Immutable realisation of all event streams of one replication.

    True signals are a subset of change times; ``*_delay`` hold per-signal
    arrival delays (zeros when the instance has no delays).
    """

    horizon: float
    changes: Csr
    requests: Csr
    cis_true: Csr
    cis_false: Csr
    delay_true: np.ndarray
    delay_false: np.ndarray

    @property
    def m(self) -> int:
        return self.changes.offsets.size - 1

    def cis_arrivals(self, delayed: bool = True):
        """All signal arrivals in (0, horizon], sorted by time then page.

        Returns ``(time, page, is_true)``; delayed signals landing past the
        horizon are dropped.
        """
        t = np.concatenate([self.cis_true.times, self.cis_false.times])
        if delayed:
            t = t + np.concatenate([self.delay_true, self.delay_false])
        p = np.concatenate([self.cis_true.page_ids(), self.cis_false.page_ids()])
        true = np.concatenate([np.ones(self.cis_true.times.size, bool), np.zeros(self.cis_false.times.size, bool)])
        keep = t <= self.horizon
        t, p, true = t[keep], p[keep], true[keep]
        order = np.lexsort((p, t))
        return np.ascontiguousarray(t[order]), np.ascontiguousarray(p[order]), true[order]


def _poisson_stream(rng, rates, horizon):
    counts = rng.poisson(np.asarray(rates) * horizon)
    times = rng.uniform(0.0, horizon, counts.sum())
    pages = np.repeat(np.arange(counts.size), counts)
    return Csr.from_events(times, pages, counts.size)


def _delays(rng, spec: InstanceSpec, n: int) -> np.ndarray:
    if spec.delay_law is None or spec.delay_mean == 0:
        return np.zeros(n)
    if spec.delay_law == "poisson":
        return rng.poisson(spec.delay_mean, n) * spec.delay_unit
    return rng.exponential(spec.delay_mean, n) * spec.delay_unit


def generate_trace(spec: InstanceSpec, pages, seed) -> EventTrace:
    """Draw change, request and signal streams for ``pages`` over ``spec.horizon``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    ps = as_pageset(pages)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    T = spec.horizon
    changes = _poisson_stream(rng, ps.delta, T)
    requests = _poisson_stream(rng, ps.mu, T)
    lam_per_change = np.repeat(ps.lam, changes.counts())
    signalled = rng.random(changes.times.size) < lam_per_change
    ids = changes.page_ids()
    cis_true = Csr.from_events(changes.times[signalled], ids[signalled], len(ps))
    cis_false = _poisson_stream(rng, ps.nu, T)
    d_true = _delays(rng, spec, cis_true.times.size)
    d_false = _delays(rng, spec, cis_false.times.size)
    return EventTrace(T, changes, requests, cis_true, cis_false, d_true, d_false)


# --------------------------------------------------------------------------
# crawl logs and scoring


@dataclass
class CrawlLog:
    """Crawl events sorted by time; ``info`` carries policy diagnostics."""

    times: np.ndarray
    pages: np.ndarray
    m: int
    info: dict = field(default_factory=dict)

    def per_page(self) -> Csr:
        return Csr.from_events(self.times, self.pages, self.m)

    @classmethod
    def from_per_page(cls, csr: Csr, info=None) -> "CrawlLog":
        pages = csr.page_ids()
        order = np.lexsort((pages, csr.times))
        return cls(csr.times[order], pages[order], csr.offsets.size - 1, info or {})


@njit(cache=True)
def _freshness(ch_t, ch_off, rq_t, rq_off, cr_t, cr_off, out):
    m = ch_off.size - 1
    for k in range(m):
        c = ch_off[k]
        ce = ch_off[k + 1]
        w = cr_off[k]
        we = cr_off[k + 1]
        last = -math.inf
        for j in range(rq_off[k], rq_off[k + 1]):
            r = rq_t[j]
            while w < we and cr_t[w] < r:
                last = cr_t[w]
                w += 1
            # first change strictly after the last crawl
            while c < ce and ch_t[c] <= last:
                c += 1
            out[j] = c == ce or ch_t[c] > r


def request_freshness(trace: EventTrace, log: CrawlLog, crawls: Csr | None = None) -> np.ndarray:
    """Fresh flag per request, aligned with ``trace.requests.times``."""
    crawls = crawls if crawls is not None else log.per_page()
    out = np.empty(trace.requests.times.size, dtype=np.bool_)
    _freshness(trace.changes.times, trace.changes.offsets, trace.requests.times,
               trace.requests.offsets, crawls.times, crawls.offsets, out)
    return out


def rolling_accuracy(trace: EventTrace, log: CrawlLog, fresh: np.ndarray, window: int = 1000) -> np.ndarray:
    """Accuracy over the requests between crawl ``n - window`` and crawl ``n``.

    One value per crawl event; the first ``window`` entries are NaN.
    """
    order = np.argsort(trace.requests.times, kind="stable")
    rt = trace.requests.times[order]
    cum = np.concatenate([[0], np.cumsum(fresh[order])])
    out = np.full(log.times.size, np.nan)
    if log.times.size <= window:
        return out
    hi = np.searchsorted(rt, log.times[window:], side="right")
    lo = np.searchsorted(rt, log.times[:-window], side="right")
    n = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        out[window:] = np.where(n > 0, (cum[hi] - cum[lo]) / np.maximum(n, 1), np.nan)
    return out


def interval_stats(trace: EventTrace, log: CrawlLog, page: int):
    """Crawl intervals of one page and the fresh time inside each.

    Time 0 counts as a crawl. Returns ``(lengths, fresh_durations)``.
    """
    c = np.concatenate([[0.0], log.per_page().page(page)])
    ch = trace.changes.page(page)
    starts, ends = c[:-1], c[1:]
    nxt = np.searchsorted(ch, starts, side="right")
    first = np.where(nxt < ch.size, ch[np.minimum(nxt, ch.size - 1)], np.inf)
    return ends - starts, np.minimum(first, ends) - starts


def request_states(trace: EventTrace, log: CrawlLog, page: int, delayed: bool = True):
    """Elapsed time, signal count and freshness seen by each request of one page."""
    crawls = log.per_page()
    c = crawls.page(page)
    rq = trace.requests.page(page)
    t, p, _ = trace.cis_arrivals(delayed)
    cis = t[p == page]
    idx = np.searchsorted(c, rq, side="left")
    last = np.where(idx > 0, c[np.maximum(idx - 1, 0)], 0.0)
    n = np.searchsorted(cis, rq, side="right") - np.searchsorted(cis, last, side="right")
    fresh = request_freshness(trace, log, crawls)[trace.requests.offsets[page]:trace.requests.offsets[page + 1]]
    return rq - last, n, fresh


# --------------------------------------------------------------------------
# policies


class Policy(Protocol):
    name: str

    def crawl_log(self, trace: EventTrace, pages: PageSet, schedule: BandwidthSchedule) -> CrawlLog: ...


@dataclass
class GreedyPolicy:
    """Greedy argmax policy on ticks of the bandwidth schedule.

    ``bandwidth`` overrides the instance schedule (used for reference runs);
    ``delayed=False`` feeds the signals without their delays. With
    ``shards > 1`` pages are dealt round-robin to independent schedulers that
    each get an equal share of the bandwidth.
    """

    variant: object = "greedy-ncis"
    delay_window: float = 0.0
    index_mode: str = "lazy"
    bandwidth: object = None
    delayed: bool = True
    shards: int = 1
    name: str = ""

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.bandwidth is not None:
            self.bandwidth = BandwidthSchedule.coerce(self.bandwidth)
        if self.index_mode not in ("exact", "lazy"):
            raise ValueError(f"unknown index mode {self.index_mode!r}")
        if self.delay_window < 0:
            raise ValueError("delay window must be >= 0")
        if self.shards < 1:
            raise ValueError("shards must be >= 1")
        if not self.name:
            self.name = self.variant.label + ("-D" if self.delay_window > 0 else "")

    def _run(self, ticks, ct, cp, pages):
        v = self.variant
        par = param_matrix(pages, v)
        state = initial_state(len(pages))
        out, kept = _run_greedy(ticks, ct, cp, int(v.kind), v.level, self.index_mode == "lazy",
                                float(self.delay_window), par, *state)
        return out, int(state[4].sum()), int(kept)

    def crawl_log(self, trace, pages, schedule):
        schedule = self.bandwidth or schedule
        if self.variant.uses_cis:
            ct, cp, _ = trace.cis_arrivals(self.delayed)
        else:
            ct, cp = np.empty(0), np.empty(0, dtype=np.int64)
        m = len(pages)
        if self.shards == 1:
            ticks = schedule.ticks(trace.horizon)
            out, evals, kept = self._run(ticks, ct, cp, pages)
            return CrawlLog(ticks, out, m, {"evaluations": evals, "signals_kept": kept})
        share = BandwidthSchedule(tuple((s, r / self.shards) for s, r in schedule.segments))
        ticks = share.ticks(trace.horizon)
        times, crawled, evals, kept = [], [], 0, 0
        for s in range(min(self.shards, m)):
            idx = np.arange(s, m, self.shards)
            sub = PageSet(pages.delta[idx], pages.mu[idx], pages.lam[idx], pages.nu[idx])
            sel = cp % self.shards == s
            out, e, k = self._run(ticks, ct[sel], np.ascontiguousarray(cp[sel] // self.shards), sub)
            times.append(ticks)
            crawled.append(idx[out])
            evals += e
            kept += k
        t = np.concatenate(times)
        p = np.concatenate(crawled)
        order = np.lexsort((p, t))
        return CrawlLog(t[order], p[order], m, {"evaluations": evals, "signals_kept": kept})


@dataclass
class LDSPolicy:
    """Low-discrepancy tracking of the optimal continuous rates without signals."""

    name: str = "LDS"

    def crawl_log(self, trace, pages, schedule):
        if not schedule.is_constant:
            raise ValueError("LDS needs a constant bandwidth")
        R = schedule.initial_rate
        ticks = schedule.ticks(trace.horizon)
        rates = solve_no_cis(pages, R).rates
        return CrawlLog(ticks, lds_schedule(rates, ticks.size, R), len(pages))


@njit(cache=True)
def _threshold_crawls(iota, beta, kind, horizon, cis_t, cis_off, out_t, out_off):
    """Per-page crawl times of the threshold policy; ``out_t`` is filled page by page."""
    pos = 0
    m = iota.size
    for k in range(m):
        out_off[k] = pos
        if math.isinf(iota[k]):
            continue
        last = 0.0
        now = 0.0
        n = 0
        ci = cis_off[k]
        ce = cis_off[k + 1] if kind != 0 else ci
        while True:
            # crawl time if no further signal arrives
            if n == 0:
                due = last + iota[k]
            elif kind == 1 or math.isinf(beta[k]):
                due = now
            else:
                due = max(now, last + iota[k] - beta[k] * n)
            nxt = cis_t[ci] if ci < ce else math.inf
            if due < nxt:
                if due > horizon:
                    break
                if pos >= out_t.size:
                    return -1
                out_t[pos] = due
                pos += 1
                last = due
                now = due
                n = 0
                continue
            if nxt > horizon:
                break
            # a signal tied with the due time is processed first
            ci += 1
            now = nxt
            if nxt > last:
                n += 1
    out_off[m] = pos
    return pos


@dataclass
class ThresholdPolicy:
    """Continuous threshold policy: crawl a page once its effective time reaches ``iotas[i]``.

    The effective time uses the variant's beliefs (no signals for GREEDY, any
    signal means stale for GREEDY-CIS).
    """

    iotas: Sequence[float]
    variant: object = "greedy-ncis"
    delayed: bool = True
    name: str = "threshold"

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.iotas = np.asarray(self.iotas, dtype=float)
        if np.any(~(self.iotas > 0)):
            raise ValueError("thresholds must be positive")

    def crawl_log(self, trace, pages, schedule=None):
        if self.iotas.size != len(pages):
            raise ValueError("one threshold per page required")
        beta = np.asarray(kernel_args(pages, self.variant)[4], dtype=float)
        ct, cp, _ = trace.cis_arrivals(self.delayed)
        cis = Csr.from_events(ct, cp, len(pages))
        kind = int(self.variant.kind)
        size = 1024 + int(4 * trace.horizon * np.sum(1.0 / self.iotas[np.isfinite(self.iotas)]))
        size += 2 * cis.times.size
        out_off = np.empty(len(pages) + 1, dtype=np.int64)
        while True:
            out_t = np.empty(size)
            pos = _threshold_crawls(self.iotas, beta, kind, trace.horizon, cis.times, cis.offsets, out_t, out_off)
            if pos >= 0:
                break
            size *= 2
        return CrawlLog.from_per_page(Csr(out_t[:pos].copy(), out_off))


@dataclass
class ChangeOraclePolicy:
    """Crawls every page at each of its changes; not bandwidth constrained."""

    name: str = "oracle"

    def crawl_log(self, trace, pages, schedule=None):
        return CrawlLog.from_per_page(trace.changes)


@dataclass
class NeverCrawlPolicy:
    name: str = "never"

    def crawl_log(self, trace, pages, schedule=None):
        return CrawlLog(np.empty(0), np.empty(0, dtype=np.int64), len(pages))


# --------------------------------------------------------------------------
# runs and replications


@dataclass
class SimulationReport:
    policy: str
    accuracy: float
    per_page_rates: np.ndarray
    n_requests: int
    n_crawls: int
    rolling: np.ndarray | None = None
    crawl_times: np.ndarray | None = None
    info: dict = field(default_factory=dict)


def run_policy(trace: EventTrace, policy, pages, schedule=None, rolling_window: int | None = None,
               keep_log: bool = False) -> SimulationReport:
    """Score one policy on one trace."""
    ps = as_pageset(pages)
    schedule = BandwidthSchedule.coerce(schedule) if schedule is not None else None
    log = policy.crawl_log(trace, ps, schedule)
    crawls = log.per_page()
    fresh = request_freshness(trace, log, crawls)
    n_req = int(fresh.size)
    acc = float(fresh.sum() / n_req) if n_req else float("nan")
    rates = crawls.counts() / trace.horizon
    rolling = rolling_accuracy(trace, log, fresh, rolling_window) if rolling_window else None
    return SimulationReport(policy.name, acc, rates, n_req, int(log.times.size), rolling,
                            log.times if (rolling_window or keep_log) else None, dict(log.info))


def mean_se(values) -> tuple[float, float | None]:
    """Mean and standard error; the error is None with fewer than two values."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return float("nan"), None
    if x.size < 2:
        return float(x.mean()), None
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def pooled_se(a, b) -> float | None:
    """Standard error of the difference of two independent means."""
    _, sa = mean_se(a)
    _, sb = mean_se(b)
    if sa is None or sb is None:
        return None
    return math.sqrt(sa * sa + sb * sb)


@dataclass
class Replication:
    seed: int
    pages: PageSet
    baseline: float
    baseline_rates: np.ndarray
    reports: dict


@dataclass
class ExperimentResult:
    spec: InstanceSpec
    policies: list
    replications: list

    def accuracies(self, name: str) -> np.ndarray:
        return np.array([r.reports[name].accuracy for r in self.replications])

    @property
    def baselines(self) -> np.ndarray:
        return np.array([r.baseline for r in self.replications])

    def summary(self, name: str) -> tuple[float, float | None]:
        return mean_se(self.accuracies(name))


def run_replication(spec: InstanceSpec, policies, seed: int, rolling_window: int | None = None) -> Replication:
    """One replication: sample pages, draw the trace once, run every policy on it."""
    rng = np.random.default_rng(seed)
    pages = spec.sample_pages(rng)
    trace = generate_trace(spec, pages, rng)
    base = solve_no_cis(pages, spec.bandwidth.initial_rate)
    baseline = continuous_accuracy(base, pages)
    reports = {}
    for pol in policies:
        if pol.name in reports:
            raise ValueError(f"duplicate policy name {pol.name!r}")
        reports[pol.name] = run_policy(trace, pol, pages, spec.bandwidth, rolling_window)
    return Replication(seed, pages, baseline, base.rates, reports)


def _replication_job(args):
    return run_replication(*args)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def run_experiment(spec: InstanceSpec, policies, replications: int = 20, seed_base: int = 0,
                   rolling_window: int | None = None, workers: int | None = None) -> ExperimentResult:
    """Run every policy on common traces; replication ``r`` uses seed ``seed_base + r``."""
    if replications < 1:
        raise ValueError("need at least one replication")
    policies = list(policies)
    jobs = [(spec, policies, seed_base + r, rolling_window) for r in range(replications)]
    workers = worker_count() if workers is None else max(1, workers)
    if workers == 1 or replications == 1:
        reps = [_replication_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, replications)) as ex:
            reps = list(ex.map(_replication_job, jobs))
    return ExperimentResult(spec, [p.name for p in policies], reps)


# --------------------------------------------------------------------------
# trace files

TRACE_KINDS = ("change", "request", "cis_true", "cis_false", "crawl")


def write_trace_csv(path, trace: EventTrace, log: CrawlLog | None = None, delayed: bool = True) -> None:
    """Write events as ``time,page,kind`` rows sorted by time.

    Signals are written at their arrival times. Rows at equal times follow
    the processing order change, signal, request, crawl.
    """
    rank = {"change": 0, "cis_true": 1, "cis_false": 1, "request": 2, "crawl": 3}
    cols_t, cols_p, cols_k = [], [], []

    def add(times, pages, kind):
        cols_t.append(np.asarray(times, dtype=float))
        cols_p.append(np.asarray(pages, dtype=np.int64))
        cols_k.append(np.full(len(times), TRACE_KINDS.index(kind)))

    add(trace.changes.times, trace.changes.page_ids(), "change")
    add(trace.requests.times, trace.requests.page_ids(), "request")
    t, p, true = trace.cis_arrivals(delayed)
    add(t[true], p[true], "cis_true")
    add(t[~true], p[~true], "cis_false")
    if log is not None:
        add(log.times, log.pages, "crawl")
    t = np.concatenate(cols_t)
    p = np.concatenate(cols_p)
    k = np.concatenate(cols_k)
    r = np.array([rank[TRACE_KINDS[i]] for i in range(len(TRACE_KINDS))])[k]
    order = np.lexsort((p, r, t))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "page", "kind"])
        for i in order:
            w.writerow([repr(float(t[i])), int(p[i]), TRACE_KINDS[k[i]]])


def read_trace_csv(path, horizon: float | None = None):
    """Read a ``time,page,kind`` file back into an :class:`EventTrace` and crawl log.

    Signals are taken as undelayed arrivals. The horizon defaults to the last
    event time. The crawl log is None when the file has no crawl rows.
    """
    rows = {k: ([], []) for k in TRACE_KINDS}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["time", "page", "kind"]:
            raise ValueError(f"{path}: expected header time,page,kind")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 or row[2] not in rows:
                raise ValueError(f"{path}:{lineno}: malformed record {row!r}")
            try:
                t, p = float(row[0]), int(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed record {row!r}") from None
            if p < 0 or not t >= 0:
                raise ValueError(f"{path}:{lineno}: negative time or page")
            rows[row[2]][0].append(t)
            rows[row[2]][1].append(p)
    all_p = [p for ts, ps in rows.values() for p in ps]
    all_t = [t for ts, ps in rows.values() for t in ts]
    m = max(all_p) + 1 if all_p else 0
    T = horizon if horizon is not None else (max(all_t) if all_t else 0.0)
    csr = {k: Csr.from_events(v[0], v[1], m) for k, v in rows.items()}
    trace = EventTrace(T, csr["change"], csr["request"], csr["cis_true"], csr["cis_false"],
                       np.zeros(csr["cis_true"].times.size), np.zeros(csr["cis_false"].times.size))
    log = CrawlLog.from_per_page(csr["crawl"]) if rows["crawl"][0] else None
    return trace, log
