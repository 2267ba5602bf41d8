"""Experiment configuration files and built-in presets.

A config is a YAML document. Validation errors carry ``file:line`` anchors
taken from the YAML source. See the README for the full grammar.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import yaml

from .simulator import BandwidthSchedule, GreedyPolicy, InstanceSpec, LDSPolicy
from .values import Variant

SCHEMA_VERSION = 1
DEFAULT_REPLICATIONS = 20


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# YAML with line numbers


class _LineDict(dict):
    line: int = 0
    key_lines: dict


class _LineList(list):
    line: int = 0
    item_lines: list


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _LineDict()
    out.line = node.start_mark.line + 1
    out.key_lines = {}
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        if key in out:
            raise ConfigError(f"line {k_node.start_mark.line + 1}: duplicate key {key!r}")
        out[key] = loader.construct_object(v_node, deep=True)
        out.key_lines[key] = v_node.start_mark.line + 1
    return out


def _construct_sequence(loader, node):
    out = _LineList(loader.construct_object(n, deep=True) for n in node.value)
    out.line = node.start_mark.line + 1
    out.item_lines = [n.start_mark.line + 1 for n in node.value]
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_sequence)


class _Ctx:
    """Error reporting helper bound to a source name."""

    def __init__(self, source: str):
        self.source = source

    def fail(self, line, msg):
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: {msg}")

    def section(self, parent, key, required=True):
        if key not in parent:
            if required:
                self.fail(getattr(parent, "line", 0), f"missing section '{key}'")
            return None
        val = parent[key]
        if not isinstance(val, dict):
            self.fail(self.line_of(parent, key), f"'{key}' must be a mapping")
        return val

    @staticmethod
    def line_of(parent, key):
        lines = getattr(parent, "key_lines", None)
        return lines.get(key, getattr(parent, "line", 0)) if lines else getattr(parent, "line", 0)

    def check_keys(self, mapping, allowed, where):
        for k in mapping:
            if k not in allowed:
                allowed_list = ", ".join(sorted(allowed))
                self.fail(self.line_of(mapping, k), f"unknown key '{k}' in {where}; allowed: {allowed_list}")

    def number(self, parent, key, default=None, positive=False, nonneg=False, integer=False):
        if key not in parent:
            if default is None:
                self.fail(getattr(parent, "line", 0), f"missing '{key}'")
            return default
        v = parent[key]
        line = self.line_of(parent, key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(line, f"'{key}' must be a number, got {v!r}")
        if integer and (not float(v).is_integer()):
            self.fail(line, f"'{key}' must be an integer")
        if not math.isfinite(v):
            self.fail(line, f"'{key}' must be finite")
        if positive and v <= 0:
            self.fail(line, f"'{key}' must be positive")
        if nonneg and v < 0:
            self.fail(line, f"'{key}' must be >= 0")
        return int(v) if integer else float(v)

    def range_pair(self, parent, key, default, lo=0.0, hi=math.inf):
        if key not in parent:
            return default
        v = parent[key]
        line = self.line_of(parent, key)
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            v = [v, v]
        if (not isinstance(v, list) or len(v) != 2
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
            self.fail(line, f"'{key}' must be a number or a [low, high] pair")
        a, b = float(v[0]), float(v[1])
        if not lo <= a <= b <= hi:
            self.fail(line, f"'{key}' needs {lo} <= low <= high <= {hi}")
        return (a, b)


# --------------------------------------------------------------------------
# config objects


@dataclass
class PolicyConfig:
    variant: str
    name: str = ""
    delay_window: float = 0.0
    index_mode: str = "lazy"
    bandwidth: object = None
    delayed: bool = True
    shards: int = 1

    def build(self):
        if self.variant == "lds":
            if self.delay_window or self.bandwidth is not None or self.shards != 1:
                raise ConfigError("LDS takes no delay window, bandwidth override or shards")
            return LDSPolicy(name=self.name or "LDS")
        return GreedyPolicy(self.variant, delay_window=self.delay_window, index_mode=self.index_mode,
                            bandwidth=self.bandwidth, delayed=self.delayed, shards=self.shards, name=self.name)


@dataclass
class OutputConfig:
    dir: str = "out"
    per_page_reps: int = 1
    rolling_window: int | None = None
    rolling_stride: int = 100


@dataclass
class EstimationConfig:
    horizon: float = 1e5
    precision: tuple = (0.2, 0.95)
    recall: tuple = (0.2, 0.95)
    change_interval: tuple = (2.0, 20.0)
    crawl_factor: tuple = (0.25, 4.0)


@dataclass
class ExperimentConfig:
    name: str
    experiment: str
    description: str = ""
    seed: int = 0
    replications: int = DEFAULT_REPLICATIONS
    pages: list = field(default_factory=list)
    instance: dict = field(default_factory=dict)
    policies: list = field(default_factory=list)
    estimation: EstimationConfig | None = None
    output: OutputConfig = field(default_factory=OutputConfig)

    def instance_spec(self, m: int) -> InstanceSpec:
        return InstanceSpec(m=m, **self.instance)

    def build_policies(self):
        return [p.build() for p in self.policies]


_TOP = {"name", "description", "experiment", "seed", "replications", "instance", "policies", "estimation", "output"}
_INSTANCE = {"pages", "horizon", "bandwidth", "change_rate", "request_rate", "recall", "false_signal_rate", "delay"}
_POLICY = {"variant", "name", "delay_window", "index_mode", "bandwidth", "delayed_signals", "shards"}
_OUTPUT = {"dir", "per_page_reps", "rolling_window", "rolling_stride"}
_ESTIMATION = {"horizon", "precision", "recall", "change_interval", "crawl_factor"}
_DELAY = {"law", "mean", "unit"}


def _bandwidth(ctx, parent, key):
    v = parent[key]
    line = ctx.line_of(parent, key)
    try:
        if isinstance(v, bool):
            raise ValueError("bandwidth must be a number")
        if isinstance(v, list):
            for i, seg in enumerate(v):
                if not isinstance(seg, list) or len(seg) != 2:
                    ctx.fail(v.item_lines[i], "schedule entries must be [start_time, rate] pairs")
        return BandwidthSchedule.coerce(v)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        ctx.fail(line, f"invalid bandwidth: {exc}")


def _parse_instance(ctx, inst):
    ctx.check_keys(inst, _INSTANCE, "instance")
    if "pages" not in inst:
        ctx.fail(inst.line, "missing 'pages'")
    pages = inst["pages"]
    line = ctx.line_of(inst, "pages")
    pages = pages if isinstance(pages, list) else [pages]
    if not pages or not all(isinstance(m, int) and not isinstance(m, bool) and m >= 1 for m in pages):
        ctx.fail(line, "'pages' must be a positive integer or a list of them")
    out = {
        "horizon": ctx.number(inst, "horizon", positive=True),
        "bandwidth": (_bandwidth(ctx, inst, "bandwidth") if "bandwidth" in inst
                      else ctx.fail(inst.line, "missing 'bandwidth'")),
        "delta_range": ctx.range_pair(inst, "change_rate", (0.0, 1.0)),
        "mu_range": ctx.range_pair(inst, "request_rate", (0.0, 1.0)),
    }
    if "recall" in inst:
        r = inst["recall"]
        rl = ctx.line_of(inst, "recall")
        if isinstance(r, dict):
            ctx.check_keys(r, {"beta"}, "recall")
            ab = r.get("beta")
            if not isinstance(ab, list) or len(ab) != 2 or not all(isinstance(x, (int, float)) and x > 0 for x in ab):
                ctx.fail(rl, "recall beta law needs two positive parameters: {beta: [a, b]}")
            out["lam_a"], out["lam_b"] = float(ab[0]), float(ab[1])
        else:
            out["lam"] = ctx.number(inst, "recall", nonneg=True)
            if out["lam"] > 1:
                ctx.fail(rl, "'recall' must lie in [0, 1]")
    nu = ctx.range_pair(inst, "false_signal_rate", (0.0, 0.0))
    out["nu_min"], out["nu_max"] = nu
    if "delay" in inst:
        d = ctx.section(inst, "delay")
        ctx.check_keys(d, _DELAY, "delay")
        law = d.get("law")
        if law not in ("poisson", "exponential"):
            ctx.fail(ctx.line_of(d, "law"), "delay 'law' must be poisson or exponential")
        out["delay_law"] = law
        out["delay_mean"] = ctx.number(d, "mean", nonneg=True)
        out["delay_unit"] = ctx.number(d, "unit", default=1.0, positive=True)
    return [int(m) for m in pages], out


def _parse_policies(ctx, pols, line):
    if not isinstance(pols, list) or not pols:
        ctx.fail(line, "'policies' must be a non-empty list")
    out = []
    names = set()
    for i, p in enumerate(pols):
        pl = pols.item_lines[i]
        if isinstance(p, str):
            p = {"variant": p}
        if not isinstance(p, dict):
            ctx.fail(pl, "each policy is a variant name or a mapping")
        ctx.check_keys(p, _POLICY, "policy")
        variant = p.get("variant")
        if not isinstance(variant, str):
            ctx.fail(pl, "policy needs a 'variant'")
        variant = variant.lower()
        if variant != "lds":
            try:
                Variant.parse(variant)
            except ValueError as exc:
                ctx.fail(ctx.line_of(p, "variant") if hasattr(p, "key_lines") else pl, str(exc))
        cfg = PolicyConfig(variant)
        if "name" in p:
            cfg.name = str(p["name"])
        if "delay_window" in p:
            cfg.delay_window = ctx.number(p, "delay_window", nonneg=True)
        if "index_mode" in p:
            if p["index_mode"] not in ("lazy", "exact"):
                ctx.fail(ctx.line_of(p, "index_mode"), "index_mode must be lazy or exact")
            cfg.index_mode = p["index_mode"]
        if "bandwidth" in p:
            cfg.bandwidth = _bandwidth(ctx, p, "bandwidth")
        if "delayed_signals" in p:
            if not isinstance(p["delayed_signals"], bool):
                ctx.fail(ctx.line_of(p, "delayed_signals"), "delayed_signals must be true or false")
            cfg.delayed = p["delayed_signals"]
        if "shards" in p:
            cfg.shards = ctx.number(p, "shards", positive=True, integer=True)
        try:
            name = cfg.build().name
        except (ConfigError, ValueError) as exc:
            ctx.fail(pl, str(exc))
        if name in names:
            ctx.fail(pl, f"duplicate policy name {name!r}; set 'name'")
        names.add(name)
        out.append(cfg)
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    ctx = _Ctx(source)
    try:
        doc = yaml.load(text, Loader=_Loader)
    except ConfigError as exc:
        raise ConfigError(f"{source}:{str(exc).removeprefix('line ')}") from None
    except yaml.YAMLError as exc:
        # the construct left open is more useful than where parsing gave up
        mark = getattr(exc, "context_mark", None) or getattr(exc, "problem_mark", None)
        ctx.fail(mark.line + 1 if mark else 0, f"YAML syntax error: {getattr(exc, 'problem', exc)}")
    if not isinstance(doc, dict):
        ctx.fail(1, "config must be a mapping")
    ctx.check_keys(doc, _TOP, "config")
    kind = doc.get("experiment", "simulation")
    if kind not in ("simulation", "estimation"):
        ctx.fail(ctx.line_of(doc, "experiment"), "experiment must be simulation or estimation")
    cfg = ExperimentConfig(name=str(doc.get("name", "experiment")), experiment=kind,
                           description=str(doc.get("description", "")))
    cfg.seed = ctx.number(doc, "seed", default=0, nonneg=True, integer=True)
    cfg.replications = ctx.number(doc, "replications", default=DEFAULT_REPLICATIONS, positive=True, integer=True)

    out = ctx.section(doc, "output", required=False) or {}
    ctx.check_keys(out, _OUTPUT, "output")
    o = OutputConfig()
    if "dir" in out:
        o.dir = str(out["dir"])
    o.per_page_reps = ctx.number(out, "per_page_reps", default=1, nonneg=True, integer=True)
    if "rolling_window" in out:
        o.rolling_window = ctx.number(out, "rolling_window", positive=True, integer=True)
    o.rolling_stride = ctx.number(out, "rolling_stride", default=100, positive=True, integer=True)
    cfg.output = o

    if kind == "estimation":
        for k in ("instance", "policies"):
            if k in doc:
                ctx.fail(ctx.line_of(doc, k), f"'{k}' is not used by estimation experiments")
        est = ctx.section(doc, "estimation", required=False) or {}
        ctx.check_keys(est, _ESTIMATION, "estimation")
        e = EstimationConfig()
        e.horizon = ctx.number(est, "horizon", default=e.horizon, positive=True)
        e.precision = ctx.range_pair(est, "precision", e.precision, 0.0, 1.0)
        e.recall = ctx.range_pair(est, "recall", e.recall, 0.0, 1.0)
        e.change_interval = ctx.range_pair(est, "change_interval", e.change_interval)
        e.crawl_factor = ctx.range_pair(est, "crawl_factor", e.crawl_factor)
        if e.precision[0] <= 0 or e.change_interval[0] <= 0 or e.crawl_factor[0] <= 0:
            ctx.fail(est.line, "precision, change_interval and crawl_factor must be positive")
        cfg.estimation = e
        return cfg

    if "estimation" in doc:
        ctx.fail(ctx.line_of(doc, "estimation"), "'estimation' is only valid for estimation experiments")
    inst = ctx.section(doc, "instance")
    cfg.pages, cfg.instance = _parse_instance(ctx, inst)
    if "policies" not in doc:
        ctx.fail(doc.line, "missing section 'policies'")
    cfg.policies = _parse_policies(ctx, doc["policies"], ctx.line_of(doc, "policies"))
    try:
        cfg.instance_spec(cfg.pages[0])
    except ValueError as exc:
        ctx.fail(inst.line, str(exc))
    if any(p.variant == "lds" for p in cfg.policies) and not cfg.instance["bandwidth"].is_constant:
        ctx.fail(ctx.line_of(doc, "policies"), "LDS needs a constant bandwidth")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, str(path))


# --------------------------------------------------------------------------
# presets

_GRID = [100, 200, 500, 750, 1000]
_BASE = {"horizon": 1000, "bandwidth": 100, "change_rate": [0, 1], "request_rate": [0, 1]}
_SIGNALS = {"recall": {"beta": [0.25, 0.25]}}
_NOISY = {"recall": {"beta": [0.25, 0.25]}, "false_signal_rate": [0.1, 0.6]}
_ALL_GREEDY = ["greedy", "greedy-cis", "greedy-ncis", "approx-1", "approx-2"]

_PRESETS = {
    "fig2": {
        "description": "No signals: GREEDY and LDS against the continuous baseline, R=100, T=1000, "
                       "change and request rates uniform on [0,1].",
        "instance": {"pages": _GRID, **_BASE},
        "policies": ["greedy", "lds"],
    },
    "fig3": {
        "description": "Noiseless partial signals: recall ~ Beta(0.25,0.25), no false signals; "
                       "GREEDY versus GREEDY-CIS.",
        "instance": {"pages": _GRID, **_BASE, **_SIGNALS},
        "policies": ["greedy", "greedy-cis"],
    },
    "fig4-rates": {
        "description": "Per-page empirical crawl rates of GREEDY and GREEDY-CIS against baseline rates, "
                       "noiseless partial signals, 10 instances each of 100 and 500 pages.",
        "replications": 10,
        "instance": {"pages": [100, 500], **_BASE, **_SIGNALS},
        "policies": ["greedy", "greedy-cis"],
        "output": {"per_page_reps": 10},
    },
    "fig5": {
        "description": "Noisy partial signals: recall ~ Beta(0.25,0.25), false signal rate ~ U(0.1,0.6); "
                       "all five greedy variants up to 10000 pages.",
        "instance": {"pages": _GRID + [10000], **_BASE, **_NOISY},
        "policies": _ALL_GREEDY,
    },
    "fig6-rates": {
        "description": "Per-page empirical crawl rates of GREEDY, GREEDY-CIS and GREEDY-NCIS with noisy signals.",
        "replications": 10,
        "instance": {"pages": [100], **_BASE, **_NOISY},
        "policies": ["greedy", "greedy-cis", "greedy-ncis"],
        "output": {"per_page_reps": 10},
    },
    "burnin": {
        "description": "Bandwidth 100, raised to 150 at t=133 and back to 100 at t=266; GREEDY on 1000 pages "
                       "for t<=400 with constant-bandwidth reference runs and rolling accuracy over the "
                       "last 1000 crawls.",
        "instance": {"pages": 1000, "horizon": 400, "bandwidth": [[0, 100], [133, 150], [266, 100]],
                     "change_rate": [0, 1], "request_rate": [0, 1]},
        "policies": [
            {"variant": "greedy", "name": "GREEDY"},
            {"variant": "greedy", "name": "GREEDY-R100", "bandwidth": 100},
            {"variant": "greedy", "name": "GREEDY-R150", "bandwidth": 150},
        ],
        "output": {"rolling_window": 1000, "rolling_stride": 100},
    },
    "delay": {
        "description": "Noisy partial signals delayed by Poisson(6) multiples of 1/R; GREEDY-NCIS with "
                       "undelayed signals, with delayed signals, and with delayed signals filtered by "
                       "a 5/R window (GREEDY-NCIS-D).",
        "instance": {"pages": _GRID, **_BASE, **_NOISY, "delay": {"law": "poisson", "mean": 6, "unit": 0.01}},
        "policies": [
            {"variant": "greedy-ncis", "name": "GREEDY-NCIS", "delayed_signals": False},
            {"variant": "greedy-ncis", "name": "GREEDY-NCIS-delayed"},
            {"variant": "greedy-ncis", "name": "GREEDY-NCIS-D", "delay_window": 0.05},
        ],
    },
    "estimate": {
        "description": "Signal quality estimation: precision and recall ~ U[0.2,0.95], mean change interval "
                       "~ U[2,20], crawl rate 1/4 to 4 times the change rate, horizon 1e5; MLE versus "
                       "naive counting.",
        "experiment": "estimation",
        "estimation": {"horizon": 1e5, "precision": [0.2, 0.95], "recall": [0.2, 0.95],
                       "change_interval": [2, 20], "crawl_factor": [0.25, 4]},
    },
}


def presets() -> list[str]:
    return list(_PRESETS)


def preset_text(name: str) -> str:
    """YAML source of a preset."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(presets())}")
    doc = {"name": name, **copy.deepcopy(_PRESETS[name])}
    doc.setdefault("experiment", "simulation")
    doc.setdefault("seed", 0)
    doc.setdefault("replications", DEFAULT_REPLICATIONS)
    out = doc.setdefault("output", {})
    out.setdefault("dir", f"out/{name}")
    return yaml.safe_dump(doc, sort_keys=False, width=120)


def load_preset(name: str) -> ExperimentConfig:
    return parse_config(preset_text(name), f"<preset {name}>")
