"""Command-line entry point: run configs and presets, validate configs, estimate signal quality."""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import estimation as est
from .config import SCHEMA_VERSION, ConfigError, ExperimentConfig, load_config, load_preset, presets
from .simulator import WORKERS_ENV, mean_se, read_trace_csv, run_experiment

SUMMARY_HEADER = ["schema_version", "experiment", "m", "policy", "replications", "mean_accuracy",
                  "se_accuracy", "baseline_accuracy", "baseline_se", "mean_crawls"]
PER_PAGE_HEADER = ["schema_version", "m", "replication", "policy", "page", "baseline_rate",
                   "empirical_rate", "delta", "mu", "lam", "nu"]
ROLLING_HEADER = ["schema_version", "m", "policy", "crawl_index", "time", "mean_rolling_accuracy",
                  "se_rolling_accuracy", "replications"]
ESTIMATE_HEADER = ["schema_version", "replication", "true_precision", "true_recall", "mle_precision",
                   "mle_recall", "naive_precision", "naive_recall", "gradient_norm", "intervals"]
ESTIMATE_SUMMARY_HEADER = ["schema_version", "estimator", "replications", "median_abs_error_precision",
                           "median_abs_error_recall"]


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "" if math.isnan(x) else repr(x)
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    os.replace(tmp, path)


class Progress:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# simulation experiments


def _summary_rows(cfg, m, res):
    rows = []
    base_mean, base_se = mean_se(res.baselines)
    n = len(res.replications)
    for name in res.policies:
        mean, se = res.summary(name)
        crawls = np.mean([r.reports[name].n_crawls for r in res.replications])
        rows.append([SCHEMA_VERSION, cfg.name, m, name, n, mean, se, base_mean, base_se, crawls])
    rows.append([SCHEMA_VERSION, cfg.name, m, "Baseline", n, base_mean, base_se, base_mean, base_se, None])
    return rows


def _per_page_rows(cfg, m, res):
    rows = []
    for r_idx, rep in enumerate(res.replications[:cfg.output.per_page_reps]):
        ps = rep.pages
        for name in res.policies:
            rates = rep.reports[name].per_page_rates
            for k in range(len(ps)):
                rows.append([SCHEMA_VERSION, m, r_idx, name, k, rep.baseline_rates[k], rates[k],
                             ps.delta[k], ps.mu[k], ps.lam[k], ps.nu[k]])
    return rows


def _rolling_rows(cfg, m, res):
    rows = []
    stride = cfg.output.rolling_stride
    for name in res.policies:
        reports = [r.reports[name] for r in res.replications]
        n = min(r.rolling.size for r in reports)
        series = np.array([r.rolling[:n] for r in reports])
        times = reports[0].crawl_times[:n]
        window = cfg.output.rolling_window
        for i in range(window + stride - 1, n, stride):
            col = series[:, i]
            mean, se = mean_se(col)
            rows.append([SCHEMA_VERSION, m, name, i + 1, times[i], mean, se, col.size])
    return rows


def run_simulation(cfg: ExperimentConfig, out_dir: Path, progress=print) -> list[Path]:
    policies = cfg.build_policies()
    window = cfg.output.rolling_window
    if window is None and not cfg.instance["bandwidth"].is_constant:
        window = cfg.output.rolling_window = 1000
    summary, per_page, rolling = [], [], []
    written = []
    for m in cfg.pages:
        progress(f"[{cfg.name}] m={m}: {cfg.replications} replications")
        res = run_experiment(cfg.instance_spec(m), policies, cfg.replications, seed_base=cfg.seed,
                             rolling_window=window)
        summary += _summary_rows(cfg, m, res)
        per_page += _per_page_rows(cfg, m, res)
        if window:
            rolling += _rolling_rows(cfg, m, res)
        # rewritten after each point so an interrupted run keeps what finished
        written = [out_dir / "summary.csv"]
        write_csv(written[0], SUMMARY_HEADER, summary)
        if cfg.output.per_page_reps:
            written.append(out_dir / "per_page_rates.csv")
            write_csv(written[-1], PER_PAGE_HEADER, per_page)
        if window:
            written.append(out_dir / "rolling_accuracy.csv")
            write_csv(written[-1], ROLLING_HEADER, rolling)
    return written


# --------------------------------------------------------------------------
# estimation experiments


def run_estimation(cfg: ExperimentConfig, out_dir: Path, progress=print) -> list[Path]:
    e = cfg.estimation
    rows = []
    err = {"mle": ([], []), "naive": ([], [])}
    progress(f"[{cfg.name}] {cfg.replications} synthetic data sets, horizon {e.horizon:g}")
    for r in range(cfg.replications):
        rng = np.random.default_rng(cfg.seed + r)
        setup = est.sample_setup(rng, e.horizon, e.precision, e.recall, e.change_interval, e.crawl_factor)
        obs, count = est.simulate_observations(setup, rng)
        q, fit = est.estimate_quality(obs, count, e.horizon)
        naive = est.estimate_naive(obs)
        rows.append([SCHEMA_VERSION, r, setup.precision, setup.recall, q.precision, q.recall,
                     naive.precision, naive.recall, fit.gradient_norm, obs[0].size])
        for key, qq in (("mle", q), ("naive", naive)):
            if qq.precision is not None:
                err[key][0].append(abs(qq.precision - setup.precision))
            if qq.recall is not None:
                err[key][1].append(abs(qq.recall - setup.recall))
    summary = [[SCHEMA_VERSION, key, cfg.replications,
                float(np.median(p)) if p else None, float(np.median(rc)) if rc else None]
               for key, (p, rc) in err.items()]
    paths = [out_dir / "estimates.csv", out_dir / "estimate_summary.csv"]
    write_csv(paths[0], ESTIMATE_HEADER, rows)
    write_csv(paths[1], ESTIMATE_SUMMARY_HEADER, summary)
    return paths


def execute(cfg: ExperimentConfig, out_dir: Path, quiet: bool = False) -> int:
    progress = Progress(quiet)
    out_dir = Path(out_dir)
    marker = out_dir / "PARTIAL"
    if marker.exists():
        marker.unlink()
    try:
        if cfg.experiment == "estimation":
            paths = run_estimation(cfg, out_dir, progress)
        else:
            paths = run_simulation(cfg, out_dir, progress)
    except Exception as exc:  # noqa: BLE001 - any failure leaves flagged partial output
        out_dir.mkdir(parents=True, exist_ok=True)
        marker.write_text(f"run failed: {type(exc).__name__}: {exc}\n", encoding="utf-8")
        print(f"error: {type(exc).__name__}: {exc}; partial outputs in {out_dir} (see PARTIAL)", file=sys.stderr)
        return 2
    for p in paths:
        progress(f"wrote {p}")
    return 0


# --------------------------------------------------------------------------
# verbs


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    return execute(cfg, Path(args.out or cfg.output.dir), args.quiet)


def _cmd_preset(args) -> int:
    if args.list:
        for name in presets():
            cfg = load_preset(name)
            print(f"{name}: {cfg.description}")
        return 0
    if not args.name:
        raise ConfigError(f"preset name required; available: {', '.join(presets())}")
    cfg = load_preset(args.name)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.reps is not None:
        if args.reps < 1:
            raise ConfigError("--reps must be >= 1")
        cfg.replications = args.reps
    if args.horizon is not None:
        if not args.horizon > 0:
            raise ConfigError("--horizon must be positive")
        if cfg.experiment == "estimation":
            cfg.estimation.horizon = args.horizon
        else:
            cfg.instance["horizon"] = args.horizon
    if args.pages:
        if cfg.experiment == "estimation":
            raise ConfigError("--pages does not apply to estimation presets")
        cfg.pages = args.pages
    return execute(cfg, Path(args.out or cfg.output.dir), args.quiet)


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    if cfg.experiment == "estimation":
        print(f"ok: estimation experiment '{cfg.name}', {cfg.replications} replications")
    else:
        names = ", ".join(p.build().name for p in cfg.policies)
        print(f"ok: simulation '{cfg.name}', pages {cfg.pages}, policies {names}, "
              f"{cfg.replications} replications")
    return 0


def _cmd_estimate(args) -> int:
    path = Path(args.log)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first == "time,page,kind":
        trace, log = read_trace_csv(path, horizon=args.horizon)
        if log is None:
            raise ConfigError(f"{path}: trace has no crawl records")
        obs, count = est.observations_from_trace(trace, log, args.page)
        horizon = trace.horizon
    else:
        obs = est.read_observation_log(path)
        count = args.cis_count
        horizon = args.horizon
        if count is None or horizon is None:
            # signal rate from the logged intervals themselves
            count, horizon = int(obs[1].sum()), float(obs[0].sum())
    if obs[0].size < 2:
        raise ConfigError(f"{path}: need at least two intervals")
    q, fit = est.estimate_quality(obs, count, horizon)
    naive = est.estimate_naive(obs)
    gamma = count / horizon
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["schema_version", "intervals", "alpha", "beta", "gamma", "precision", "recall",
                "naive_precision", "naive_recall", "gradient_norm"])
    w.writerow([_fmt(v) for v in (SCHEMA_VERSION, obs[0].size, fit.alpha, fit.beta, gamma, q.precision,
                                  q.recall, naive.precision, naive.recall, fit.gradient_norm)])
    return 0


def _page_list(text: str):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("page counts must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crawlsched", description="Crawl scheduling experiments with change signals.",
                                epilog=f"Set {WORKERS_ENV} to run replications in parallel processes.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("preset", help="run a built-in experiment")
    s.add_argument("name", nargs="?")
    s.add_argument("--list", action="store_true", help="list presets and exit")
    s.add_argument("--seed", type=int)
    s.add_argument("--reps", type=int, help="replications (default 20)")
    s.add_argument("--out")
    s.add_argument("--horizon", type=float, help="override the simulated horizon")
    s.add_argument("--pages", type=_page_list, help="override the page-count sweep, e.g. 100,200")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=_cmd_preset)

    e = sub.add_parser("estimate", help="estimate signal precision and recall from a log")
    e.add_argument("log", help="interval log (tau_elap,n_cis,z per line) or a time,page,kind trace")
    e.add_argument("--page", type=int, default=0, help="page to use from a trace file")
    e.add_argument("--horizon", type=float, help="observation horizon")
    e.add_argument("--cis-count", type=int, help="total signals over the horizon")
    e.set_defaults(func=_cmd_estimate)

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
