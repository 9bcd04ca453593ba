"""Versioned file formats: system and experiment configs (YAML), scenario CSVs, policy JSON.

Every file carries a format name and version.  Parse errors name the file and
the 1-based line of the offending entry.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .model import FeatureSchema, GridModel, ModelError, NetDCModel, PolicySpec, ScenarioRecord

SYSTEM_FORMAT = "dccoord-system"
EXPERIMENT_FORMAT = "dccoord-experiment"
POLICY_FORMAT = "dccoord-policy"
SCENARIO_HEADER = "# dccoord-scenarios v1"
RECORD_HEADER = "# dccoord-records v1"
VERSION = 1
KINDS = ("day_ahead", "policy_compare", "feasibility_vs_q", "epsilon_sweep")


class ConfigError(ValueError):
    """Invalid input file; the message starts with ``file:line:``."""

    def __init__(self, source, line, message):
        super().__init__(f"{source}:{line}: {message}")
        self.source = source
        self.line = line


# ---------------------------------------------------------------------------
# YAML with line tracking
# ---------------------------------------------------------------------------
def _marks(node, path=(), out=None):
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _marks(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _marks(v, path + (i,), out)
    return out


class _Doc:
    """Parsed YAML document plus the line of every key path."""

    def __init__(self, text, source):
        self.source = source
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
            self.data = yaml.safe_load(text)
        except yaml.MarkedYAMLError as e:
            line = e.problem_mark.line + 1 if e.problem_mark is not None else 1
            raise ConfigError(source, line, f"YAML syntax: {e.problem}") from None
        self.lines = _marks(node) if node is not None else {(): 1}
        if not isinstance(self.data, dict):
            raise ConfigError(source, 1, "top level must be a mapping")

    def line(self, path):
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path, 1)

    def fail(self, path, msg):
        raise ConfigError(self.source, self.line(path), f"{'.'.join(str(p) for p in path)}: {msg}")

    def get(self, path, default=KeyError):
        cur = self.data
        for i, p in enumerate(path):
            if isinstance(cur, list) and isinstance(p, int) and 0 <= p < len(cur):
                cur = cur[p]
                continue
            if not isinstance(cur, dict) or p not in cur:
                if default is KeyError:
                    self.fail(path[:i] or path, f"missing required key '{p}'")
                return default
            cur = cur[p]
        return cur

    def number(self, path, default=KeyError, lo=None, hi=None, integer=False):
        v = self.get(path, default)
        if v is default and default is not KeyError:
            return v
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(path, f"expected a number, got {type(v).__name__}")
        if integer and not float(v).is_integer():
            self.fail(path, "expected an integer")
        if lo is not None and v < lo:
            self.fail(path, f"must be >= {lo}")
        if hi is not None and v > hi:
            self.fail(path, f"must be <= {hi}")
        return int(v) if integer else float(v)

    def array(self, path, shape=None, default=KeyError):
        v = self.get(path, default)
        if v is default and default is not KeyError:
            return v
        try:
            a = np.array(v, dtype=float)
        except (TypeError, ValueError):
            self.fail(path, "expected a numeric list")
        if shape is not None and a.shape != tuple(shape):
            self.fail(path, f"expected shape {tuple(shape)}, got {a.shape}")
        if not np.all(np.isfinite(a)):
            self.fail(path, "non-finite entries")
        return a

    def check_keys(self, path, allowed):
        v = self.get(path) if path else self.data
        if not isinstance(v, dict):
            self.fail(path, "expected a mapping")
        for k in v:
            if k not in allowed:
                self.fail(tuple(path) + (k,), f"unknown key (allowed: {', '.join(sorted(allowed))})")

    def header(self, fmt):
        if self.get(("format",), None) != fmt:
            self.fail(("format",), f"expected format '{fmt}'")
        if self.number(("version",), integer=True) != VERSION:
            self.fail(("version",), f"unsupported version (this build reads version {VERSION})")


def _read(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror}") from e


def _dump_yaml(path, data):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=False, default_flow_style=None, width=120)


def _floats(a):
    return np.asarray(a, dtype=float).tolist()


# ---------------------------------------------------------------------------
# system files
# ---------------------------------------------------------------------------
GRID_VECTORS = ("gen_cost_lin", "gen_min", "gen_max", "ramp_up", "ramp_dn", "startup_ramp", "shutdown_ramp",
                "startup_cost", "shed_cost", "redispatch_limit")


@dataclass
class SystemFile:
    grid: GridModel
    netdc: NetDCModel
    horizon: int = 1
    generator: dict = None
    scenarios: list = None
    source: str = ""


def system_dict(grid, netdc, horizon=1, generator=None, scenarios_file=None):
    g = {"buses": list(grid.bus_names), "lines": [[int(f), int(t), float(c)] for f, t, c in grid.lines],
         "ptdf": _floats(grid.ptdf)}
    C = grid.gen_cost_quad
    g["gen_cost_quad"] = _floats(np.diag(C)) if np.count_nonzero(C - np.diag(np.diag(C))) == 0 else _floats(C)
    for nm in GRID_VECTORS:
        g[nm] = _floats(getattr(grid, nm))
    n = {"names": list(netdc.dc_names), "dc_bus": [int(b) for b in netdc.dc_bus], "n_users": netdc.n_users,
         "distance": _floats(netdc.distance), "conversion": _floats(netdc.conversion),
         "latency_loss_cap": netdc.latency_loss_cap, "alloc_reg": netdc.alloc_reg, "shift_reg": netdc.shift_reg}
    out = {"format": SYSTEM_FORMAT, "version": VERSION, "grid": g, "netdc": n, "topology": {"horizon": int(horizon)}}
    if generator is not None:
        out["generator"] = dict(generator)
    if scenarios_file is not None:
        out["scenarios"] = scenarios_file
    return out


def save_system(path, grid, netdc, horizon=1, generator=None, scenarios_file=None):
    _dump_yaml(path, system_dict(grid, netdc, horizon, generator, scenarios_file))


def load_system(path, load_scenarios_file=True):
    doc = _Doc(_read(path), path)
    doc.header(SYSTEM_FORMAT)
    doc.check_keys((), {"format", "version", "grid", "netdc", "topology", "generator", "scenarios"})
    doc.check_keys(("grid",), {"buses", "lines", "ptdf", "gen_cost_quad"} | set(GRID_VECTORS))
    names = doc.get(("grid", "buses"))
    if not isinstance(names, list) or not names:
        doc.fail(("grid", "buses"), "expected a nonempty list of bus names")
    b = len(names)
    idx = {str(nm): i for i, nm in enumerate(names)}
    lines = []
    for i, ln in enumerate(doc.get(("grid", "lines"))):
        if not isinstance(ln, list) or len(ln) != 3:
            doc.fail(("grid", "lines", i), "expected [from, to, capacity]")
        ends = []
        for e in ln[:2]:
            if isinstance(e, int) and not isinstance(e, bool) and 0 <= e < b:
                ends.append(e)
            elif str(e) in idx:
                ends.append(idx[str(e)])
            else:
                doc.fail(("grid", "lines", i), f"unknown bus '{e}'")
        lines.append((ends[0], ends[1], doc.number(("grid", "lines", i, 2), lo=0.0)))
    ptdf = doc.array(("grid", "ptdf"), (len(lines), b))
    vec = {nm: doc.array(("grid", nm), (b,)) for nm in GRID_VECTORS}
    C = doc.array(("grid", "gen_cost_quad"))
    if C.shape not in ((b,), (b, b)):
        doc.fail(("grid", "gen_cost_quad"), f"expected {b} diagonal entries or a {b}x{b} matrix")
    try:
        grid = GridModel(b, tuple(lines), ptdf, gen_cost_quad=C, bus_names=tuple(str(x) for x in names), **vec)
    except ModelError as e:
        doc.fail(("grid",), str(e))

    doc.check_keys(("netdc",), {"names", "dc_bus", "n_users", "distance", "conversion", "latency_loss_cap",
                                "alloc_reg", "shift_reg"})
    dc_bus = doc.get(("netdc", "dc_bus"))
    if not isinstance(dc_bus, list) or not dc_bus:
        doc.fail(("netdc", "dc_bus"), "expected a nonempty list of bus indices")
    n = len(dc_bus)
    m = doc.number(("netdc", "n_users"), lo=1, integer=True)
    try:
        netdc = NetDCModel(n, m, doc.array(("netdc", "distance"), (n, m)), doc.array(("netdc", "conversion"), (b, n)),
                           tuple(int(x) for x in dc_bus), doc.number(("netdc", "latency_loss_cap"), 1.0, lo=0.0),
                           doc.number(("netdc", "alloc_reg"), 1e-5), doc.number(("netdc", "shift_reg"), 1e-5),
                           tuple(str(x) for x in doc.get(("netdc", "names"), [])))
    except ModelError as e:
        doc.fail(("netdc",), str(e))
    horizon = doc.number(("topology", "horizon"), 1, lo=1, integer=True)
    gen = doc.get(("generator",), None)
    if gen is not None and not isinstance(gen, dict):
        doc.fail(("generator",), "expected a mapping")
    scen = None
    sfile = doc.get(("scenarios",), None)
    if sfile is not None and load_scenarios_file:
        spath = os.path.join(os.path.dirname(os.path.abspath(path)), str(sfile))
        scen = load_scenarios(spath, b, m)
    return SystemFile(grid, netdc, horizon, gen, scen, path)


# ---------------------------------------------------------------------------
# CSV scenarios and records
# ---------------------------------------------------------------------------
def _fmt(v):
    return repr(float(v))


def _write_csv(path, header, columns, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def save_scenarios(path, records):
    """One row per (scenario, hour): loads d:*, renewables w:*, computing demand delta:*."""
    if not records:
        raise ModelError("no scenarios to write")
    b = records[0].loads.shape[1]
    m = records[0].compute_demand.shape[1]
    cols = ["scenario", "hour"] + [f"d:{i}" for i in range(b)] + [f"w:{i}" for i in range(b)]
    cols += [f"delta:{j}" for j in range(m)]
    rows = []
    for r in records:
        for t in range(r.horizon):
            rows.append([r.name, t] + [_fmt(v) for v in r.loads[t]] + [_fmt(v) for v in r.renewables[t]]
                        + [_fmt(v) for v in r.compute_demand[t]])
    _write_csv(path, SCENARIO_HEADER, cols, rows)


def save_records(path, records):
    """Single-period records with day-ahead dispatch pdot:*, commitment u:* and features x:*."""
    if not records:
        raise ModelError("no records to write")
    r0 = records[0]
    b, m = r0.loads.shape[1], r0.compute_demand.shape[1]
    nx = 0 if r0.features is None else r0.features.shape[0]
    cols = (["record"] + [f"d:{i}" for i in range(b)] + [f"w:{i}" for i in range(b)]
            + [f"delta:{j}" for j in range(m)] + [f"pdot:{i}" for i in range(b)] + [f"u:{i}" for i in range(b)]
            + [f"x:{i}" for i in range(nx)])
    rows = []
    for r in records:
        if r.horizon != 1:
            raise ModelError("records must be single-period")
        extra = []
        for v, size in ((r.day_ahead_dispatch, b), (r.commitment, b), (r.features, nx)):
            extra += [""] * size if v is None else [_fmt(x) for x in v]
        rows.append([r.name] + [_fmt(v) for v in np.concatenate([r.loads[0], r.renewables[0],
                                                                  r.compute_demand[0]])] + extra)
    _write_csv(path, RECORD_HEADER, cols, rows)


def _read_csv(path, header):
    text = _read(path)
    lines = text.splitlines()
    if not lines or lines[0].strip() != header:
        raise ConfigError(path, 1, f"expected header line '{header}'")
    reader = csv.reader(lines[1:])
    try:
        cols = next(reader)
    except StopIteration:
        raise ConfigError(path, 2, "missing column header") from None
    rows = [(i + 3, row) for i, row in enumerate(reader) if row]
    return cols, rows


def _block(path, cols, prefix, size, lineno=2):
    want = [f"{prefix}:{i}" for i in range(size)] if size is not None else None
    have = [c for c in cols if c.startswith(prefix + ":")]
    if want is not None and have != want:
        raise ConfigError(path, lineno, f"expected columns {prefix}:0..{prefix}:{size - 1}")
    return [cols.index(c) for c in have]


def _values(path, lineno, row, idx, allow_blank=False):
    raw = [row[i] if i < len(row) else "" for i in idx]
    if allow_blank and all(v == "" for v in raw):
        return None
    try:
        return np.array([float(v) for v in raw])
    except ValueError:
        raise ConfigError(path, lineno, "non-numeric entry") from None


def load_scenarios(path, n_buses=None, n_users=None):
    cols, rows = _read_csv(path, SCENARIO_HEADER)
    if cols[:2] != ["scenario", "hour"]:
        raise ConfigError(path, 2, "first columns must be scenario,hour")
    di = _block(path, cols, "d", n_buses)
    wi = _block(path, cols, "w", len(di))
    li = _block(path, cols, "delta", n_users)
    groups = {}
    order = []
    for lineno, row in rows:
        if len(row) != len(cols):
            raise ConfigError(path, lineno, f"expected {len(cols)} fields, got {len(row)}")
        name = row[0]
        try:
            hour = int(row[1])
        except ValueError:
            raise ConfigError(path, lineno, "hour must be an integer") from None
        if name not in groups:
            groups[name] = []
            order.append(name)
        if hour != len(groups[name]):
            raise ConfigError(path, lineno, f"scenario '{name}': hours must be consecutive from 0")
        groups[name].append((lineno, _values(path, lineno, row, di), _values(path, lineno, row, wi),
                             _values(path, lineno, row, li)))
    out = []
    for name in order:
        g = groups[name]
        try:
            out.append(ScenarioRecord(np.array([x[1] for x in g]), np.array([x[2] for x in g]),
                                      np.array([x[3] for x in g]), name=name))
        except ModelError as e:
            raise ConfigError(path, g[0][0], f"scenario '{name}': {e}") from None
    return out


def load_records(path, n_buses=None, n_users=None):
    cols, rows = _read_csv(path, RECORD_HEADER)
    if cols[:1] != ["record"]:
        raise ConfigError(path, 2, "first column must be record")
    di = _block(path, cols, "d", n_buses)
    b = len(di)
    wi = _block(path, cols, "w", b)
    li = _block(path, cols, "delta", n_users)
    pi = _block(path, cols, "pdot", b)
    ui = _block(path, cols, "u", b)
    xi = _block(path, cols, "x", None)
    out = []
    for lineno, row in rows:
        if len(row) != len(cols):
            raise ConfigError(path, lineno, f"expected {len(cols)} fields, got {len(row)}")
        try:
            out.append(ScenarioRecord(_values(path, lineno, row, di)[None], _values(path, lineno, row, wi)[None],
                                      _values(path, lineno, row, li)[None],
                                      _values(path, lineno, row, xi, True) if xi else None,
                                      _values(path, lineno, row, pi, True), _values(path, lineno, row, ui, True),
                                      name=row[0]))
        except ModelError as e:
            raise ConfigError(path, lineno, str(e)) from None
    return out


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------
def policy_dict(spec):
    segs = [[nm, int(s)] for nm, s in spec.schema.segments]
    return {"format": POLICY_FORMAT, "version": VERSION, "schema": segs, "schema_hash": spec.schema.digest(),
            "l1_budget": spec.l1_budget, "l1_includes_intercept": bool(spec.l1_includes_intercept),
            "intercept": _floats(spec.intercept), "weights": _floats(spec.weights),
            "feature_mean": _floats(spec.feature_mean), "feature_scale": _floats(spec.feature_scale)}


def save_policy(path, spec):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy_dict(spec), fh, indent=1)
        fh.write("\n")


def load_policy(path):
    text = _read(path)
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(path, e.lineno, f"JSON syntax: {e.msg}") from None
    if not isinstance(d, dict) or d.get("format") != POLICY_FORMAT:
        raise ConfigError(path, 1, f"expected format '{POLICY_FORMAT}'")
    if d.get("version") != VERSION:
        raise ConfigError(path, 1, f"unsupported version {d.get('version')!r}")
    try:
        schema = FeatureSchema(tuple((str(nm), int(s)) for nm, s in d["schema"]))
        if schema.digest() != d["schema_hash"]:
            raise ConfigError(path, 1, "schema_hash does not match the stored schema")
        weights = np.array(d["weights"], dtype=float).reshape(len(d["intercept"]), -1)
        return PolicySpec(d["intercept"], weights, d["l1_budget"], d["feature_mean"], d["feature_scale"],
                          bool(d["l1_includes_intercept"]), schema)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(path, 1, f"malformed policy: {e}") from None


# ---------------------------------------------------------------------------
# experiment configs
# ---------------------------------------------------------------------------
@dataclass
class ExperimentConfig:
    system: str
    kind: str
    alphas: list
    penetrations: list = field(default_factory=lambda: [0.2])
    qs: list = field(default_factory=lambda: [25])
    epsilons: list = field(default_factory=lambda: [10.0])
    seed: int = 0
    output: str = "results"
    n_records: int = 60
    n_splits: int = 10
    r_bar_scale: float = 1.0
    gap_tol: float = 1e-6
    node_limit: int = 10**6
    workers: int = 1
    source: str = ""

    def digest(self):
        keys = ("system", "kind", "alphas", "penetrations", "qs", "epsilons", "seed", "n_records", "n_splits",
                "r_bar_scale", "gap_tol", "node_limit")
        text = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


OPTION_KEYS = ("n_records", "n_splits", "r_bar_scale", "gap_tol", "node_limit", "workers")


def _number_list(doc, key, lo=None, hi=None, integer=False, open_lo=False, open_hi=False):
    v = doc.get((key,), None)
    if v is None:
        return None
    if not isinstance(v, list) or not v:
        doc.fail((key,), "expected a nonempty list")
    out = []
    for i in range(len(v)):
        x = doc.number((key, i), integer=integer)
        if lo is not None and (x < lo or (open_lo and x == lo)):
            doc.fail((key, i), f"must be {'>' if open_lo else '>='} {lo}")
        if hi is not None and (x > hi or (open_hi and x == hi)):
            doc.fail((key, i), f"must be {'<' if open_hi else '<='} {hi}")
        out.append(x)
    return out


def load_experiment(path):
    doc = _Doc(_read(path), path)
    doc.header(EXPERIMENT_FORMAT)
    doc.check_keys((), {"format", "version", "kind", "system", "alphas", "penetrations", "qs", "epsilons", "seed",
                        "output", "options"})
    kind = doc.get(("kind",))
    if kind not in KINDS:
        doc.fail(("kind",), f"unknown experiment kind '{kind}' (one of {', '.join(KINDS)})")
    system = doc.get(("system",))
    if not isinstance(system, str):
        doc.fail(("system",), "expected a file path")
    system = os.path.join(os.path.dirname(os.path.abspath(path)), system)
    alphas = _number_list(doc, "alphas", lo=0.0)
    if alphas is None:
        doc.fail(("alphas",), "missing required key 'alphas'")
    cfg = ExperimentConfig(system, kind, alphas, source=path)
    pens = _number_list(doc, "penetrations", lo=0.0, hi=1.0, open_lo=True, open_hi=True)
    qs = _number_list(doc, "qs", lo=1, integer=True)
    eps = _number_list(doc, "epsilons", lo=0.0)
    for nm, v in (("penetrations", pens), ("qs", qs), ("epsilons", eps)):
        if v is not None:
            setattr(cfg, nm, v)
    cfg.seed = doc.number(("seed",), 0, lo=0, integer=True)
    out = doc.get(("output",), None)
    if out is not None:
        if not isinstance(out, str):
            doc.fail(("output",), "expected a directory path")
        cfg.output = out
    if doc.get(("options",), None) is not None:
        doc.check_keys(("options",), set(OPTION_KEYS))
        for key in OPTION_KEYS:
            integer = key in ("n_records", "n_splits", "node_limit", "workers")
            lo = 1 if integer else 0.0
            val = doc.number(("options", key), None, lo=lo, integer=integer)
            if val is not None:
                setattr(cfg, key, val)
    if kind in ("feasibility_vs_q", "epsilon_sweep", "policy_compare") and max(cfg.qs) >= cfg.n_records:
        doc.fail(("qs",), f"every q must be below options.n_records ({cfg.n_records})")
    return cfg


def save_experiment(path, cfg):
    data = {"format": EXPERIMENT_FORMAT, "version": VERSION, "kind": cfg.kind,
            "system": os.path.relpath(cfg.system, os.path.dirname(os.path.abspath(path))),
            "alphas": list(cfg.alphas), "penetrations": list(cfg.penetrations), "qs": list(cfg.qs),
            "epsilons": list(cfg.epsilons), "seed": cfg.seed, "output": cfg.output,
            "options": {k: getattr(cfg, k) for k in OPTION_KEYS}}
    _dump_yaml(path, data)
