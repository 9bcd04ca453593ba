"""Experiment pipelines and report emission.

Kinds:

* ``day_ahead`` - bilevel day-ahead cost against the non-coordinated plan over
  penetration x alpha, with data-center loading profiles and electricity charges.
* ``policy_compare`` - none / ideal / base / concur costs on training and test
  records over penetration x alpha.
* ``feasibility_vs_q`` - screen failure rates of base and concur policies over
  resampled training splits of each size q.
* ``epsilon_sweep`` - concur policies over L1 budgets: active features and
  test cost.

Reports are CSV files (one versioned header line, then a column header) plus a
JSON summary.  Wall times go to a separate ``timing.json`` so that the reports
themselves are byte-identical for a fixed config and seed.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bilevel import dc_injection, solve_day_ahead, solve_uc
from .bnb import NodeLimitExceeded
from .fileio import ExperimentConfig, load_system
from .lower import latency_optimal_allocation
from .model import FeatureSchema, ModelError, build_incidence
from .policy import (ACTIVE_TOL, TrainingSet, evaluate, noncoordinated_cost, prepare_training_set, screen_rates,
                     split_records, sweep_epsilon, train_base, train_concur, violation_rates)
from .synth import SyntheticSystem, generate_system, make_records

REPORT_HEADER = "# dccoord-report v1"
CASES = ("none", "ideal", "base", "concur")


@dataclass
class ReportRow:
    kind: str
    params: dict
    costs: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)
    bnb: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def flat(self):
        out = dict(self.params)
        out.update({f"cost_{k}": v for k, v in self.costs.items()})
        out.update({f"rate_{k}": v for k, v in self.rates.items()})
        out.update({f"bnb_{k}": v for k, v in self.bnb.items()})
        return out


# ---------------------------------------------------------------------------
# systems
# ---------------------------------------------------------------------------
def _rescale_penetration(netdc, scenarios, penetration):
    """Scale computing demand so the peak-hour data-center load is ``penetration`` of the (first scenario) peak load."""
    s0 = scenarios[0]
    t = int(np.argmax(s0.loads.sum(axis=1)))
    dc = dc_injection(netdc, latency_optimal_allocation(netdc, s0.compute_demand[t:t + 1]).theta).sum()
    if dc <= 0:
        raise ModelError("cannot rescale penetration: zero computing demand")
    f = penetration * s0.loads[t].sum() / dc
    return [s.replace(compute_demand=s.compute_demand * f) for s in scenarios]


def system_for(cfg, penetration, alpha):
    """The configured system at one (penetration, alpha) point."""
    sf = load_system(cfg.system)
    if sf.generator is not None:
        params = dict(sf.generator)
        params.update(penetration=float(penetration), alpha=float(alpha))
        return generate_system(**params)
    if not sf.scenarios:
        raise ModelError(f"{cfg.system}: needs a generator block or a scenarios file")
    netdc = sf.netdc.with_cap(alpha)
    scen = _rescale_penetration(netdc, sf.scenarios, penetration)
    peak = max(float(s.loads.sum(axis=1).max()) for s in scen)
    return SyntheticSystem(sf.grid, netdc, scen, scen[0], FeatureSchema.for_grid(sf.grid.n_buses, sf.grid.n_lines),
                           peak, None)


def _r_bar(cfg, grid):
    return grid.redispatch_limit * cfg.r_bar_scale


def _split_seed(seed, q, s):
    return int(np.random.SeedSequence([seed, q, s]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# day-ahead
# ---------------------------------------------------------------------------
def _charge(netdc, theta, lmp):
    if lmp is None:
        return float("nan")
    return float(np.sum(lmp * dc_injection(netdc, theta)))


def _day_ahead_job(args):
    cfg, pen, alpha, si = args
    system = system_for(cfg, pen, alpha)
    grid, netdc = system.grid, system.netdc
    scen = system.scenarios[si]
    t0 = time.perf_counter()
    alloc = latency_optimal_allocation(netdc, scen.compute_demand)
    base = solve_uc(grid, scen.loads, scen.renewables, alloc.theta, netdc, gap_tol=cfg.gap_tol,
                    node_limit=cfg.node_limit)
    params = {"penetration": pen, "alpha": alpha, "scenario": scen.name}
    topo = build_incidence(netdc.n_dc, scen.horizon)
    try:
        da = solve_day_ahead(grid, netdc, topo, scen, gap_tol=cfg.gap_tol, node_limit=cfg.node_limit,
                             W_dot=alloc.W)
        cost, theta, rep, status = da.cost, da.theta, da.report, "optimal"
    except NodeLimitExceeded as e:
        cost, theta, rep, status = e.report.objective, alloc.theta, e.report, "node_limit"
    coord = solve_uc(grid, scen.loads, scen.renewables, theta, netdc, gap_tol=cfg.gap_tol, node_limit=cfg.node_limit)
    row = ReportRow("day_ahead", params, {"none": base.cost, "day_ahead": cost, "saving": base.cost - cost},
                    {"charge_none": _charge(netdc, alloc.theta, base.lmp), "charge_coord": _charge(netdc, theta,
                                                                                                   coord.lmp)},
                    {"nodes": rep.nodes, "gap": rep.gap, "status": status}, time.perf_counter() - t0)
    profile = [(pen, alpha, scen.name, t, netdc.dc_names[i], float(alloc.theta[t, i]), float(theta[t, i]))
               for t in range(scen.horizon) for i in range(netdc.n_dc)]
    return row, profile


def run_day_ahead(cfg, pool):
    n_scen = len(system_for(cfg, cfg.penetrations[0], cfg.alphas[0]).scenarios)
    jobs = [(cfg, p, a, s) for p in cfg.penetrations for a in cfg.alphas for s in range(min(cfg.n_records, n_scen))]
    out = pool(_day_ahead_job, jobs)
    rows = [r for r, _ in out]
    profile = [x for _, prof in out for x in prof]
    tables = {"costs": _table(rows), "loading": (["penetration", "alpha", "scenario", "hour", "dc", "theta_none",
                                                  "theta_coord"], profile)}
    summ = []
    for p in cfg.penetrations:
        for a in cfg.alphas:
            rs = [r for r in rows if r.params["penetration"] == p and r.params["alpha"] == a]
            summ.append({"penetration": p, "alpha": a, "avg_none": _mean(r.costs["none"] for r in rs),
                         "avg_day_ahead": _mean(r.costs["day_ahead"] for r in rs),
                         "avg_saving": _mean(r.costs["saving"] for r in rs),
                         "avg_charge_none": _mean(r.rates["charge_none"] for r in rs),
                         "avg_charge_coord": _mean(r.rates["charge_coord"] for r in rs),
                         "node_limit_events": sum(r.bnb["status"] == "node_limit" for r in rs)})
    tables["summary"] = _dict_table(summ)
    return rows, tables, {"points": summ}


# ---------------------------------------------------------------------------
# policy experiments
# ---------------------------------------------------------------------------
def _records(cfg, system):
    return make_records(system, cfg.n_records, seed=cfg.seed, r_bar=None)


def _avg_cost(outs):
    return _mean(o.cost for o in outs)


def _policy_compare_job(args):
    cfg, pen, alpha = args
    system = system_for(cfg, pen, alpha)
    grid, netdc = system.grid, system.netdc
    r_bar = _r_bar(cfg, grid)
    t0 = time.perf_counter()
    recs = _records(cfg, system)
    q, eps = int(cfg.qs[0]), float(cfg.epsilons[0])
    train, test = split_records(recs, q, cfg.seed)
    tset = prepare_training_set(train, grid, netdc, r_bar, schema=system.schema, gap_tol=cfg.gap_tol,
                                node_limit=cfg.node_limit)
    test_ideal = prepare_training_set(test, grid, netdc, r_bar, schema=system.schema, gap_tol=cfg.gap_tol,
                                      node_limit=cfg.node_limit).ideal_costs
    base = train_base(tset, eps)
    concur, concur_cost, rep = train_concur(tset, grid, netdc, eps, r_bar, gap_tol=cfg.gap_tol,
                                            node_limit=cfg.node_limit)
    rows = []
    for tag, rs, ideal in (("train", train, tset.ideal_costs), ("test", test, test_ideal)):
        ob, oc = evaluate(base, rs, grid, netdc, r_bar), evaluate(concur, rs, grid, netdc, r_bar)
        costs = {"none": _mean(noncoordinated_cost(r, grid, netdc, r_bar) for r in rs), "ideal": float(np.mean(ideal)),
                 "base": _avg_cost(ob), "concur": _avg_cost(oc)}
        if tag == "train":
            costs["concur_training"] = float(np.mean(concur_cost))
        vb, vc = violation_rates(ob), violation_rates(oc)
        rates = {"grid_base": vb[0], "netdc_base": vb[1], "grid_concur": vc[0], "netdc_concur": vc[1]}
        rows.append(ReportRow("policy_compare", {"penetration": pen, "alpha": alpha, "split": tag, "q": q,
                                                 "eps": eps, "records": len(rs)}, costs, rates,
                              {"nodes": rep.nodes, "gap": rep.gap, "status": rep.status}))
    for r in rows:
        r.wall_time = (time.perf_counter() - t0) / len(rows)
    return rows


def run_policy_compare(cfg, pool):
    jobs = [(cfg, p, a) for p in cfg.penetrations for a in cfg.alphas]
    rows = [r for rs in pool(_policy_compare_job, jobs) for r in rs]
    return rows, {"costs": _table(rows)}, {"rows": [r.flat() for r in rows]}


def _feasibility_job(args):
    cfg, q, s, tset_all, alpha = args
    system = system_for(cfg, cfg.penetrations[0], alpha)
    grid, netdc = system.grid, system.netdc
    r_bar = _r_bar(cfg, grid)
    t0 = time.perf_counter()
    eps = float(cfg.epsilons[0])
    idx = np.arange(len(tset_all.records))
    train_i, test_i = split_records(list(idx), q, _split_seed(cfg.seed, q, s))
    tset = TrainingSet([tset_all.records[i] for i in train_i], "train", tset_all.targets[train_i],
                       tset_all.ideal_costs[train_i], tset_all.schema)
    test = [tset_all.records[i] for i in test_i]
    base = train_base(tset, eps)
    concur, _, rep = train_concur(tset, grid, netdc, eps, r_bar, gap_tol=cfg.gap_tol, node_limit=cfg.node_limit)
    vb = screen_rates(base, test, grid, netdc, r_bar)
    vc = screen_rates(concur, test, grid, netdc, r_bar)
    return ReportRow("feasibility_vs_q", {"alpha": alpha, "q": q, "split": s, "eps": eps, "test_records": len(test)},
                     {}, {"grid_base": vb[0], "grid_concur": vc[0], "netdc_base": vb[1], "netdc_concur": vc[1]},
                     {"nodes": rep.nodes, "gap": rep.gap, "status": rep.status}, time.perf_counter() - t0)


def feasibility_pool(cfg, alpha):
    """Records plus per-record ideal shifts, shared by every split."""
    system = system_for(cfg, cfg.penetrations[0], alpha)
    recs = _records(cfg, system)
    return prepare_training_set(recs, system.grid, system.netdc, _r_bar(cfg, system.grid), schema=system.schema,
                                gap_tol=cfg.gap_tol, node_limit=cfg.node_limit)


def run_feasibility(cfg, pool):
    rows, summ = [], []
    for alpha in cfg.alphas:
        tset_all = feasibility_pool(cfg, alpha)
        jobs = [(cfg, int(q), s, tset_all, alpha) for q in cfg.qs for s in range(cfg.n_splits)]
        rows += pool(_feasibility_job, jobs)
        for q in cfg.qs:
            rs = [r for r in rows if r.params["q"] == q and r.params["alpha"] == alpha]
            entry = {"alpha": alpha, "q": int(q), "splits": len(rs)}
            for key in ("grid_base", "grid_concur", "netdc_base", "netdc_concur"):
                v = np.array([r.rates[key] for r in rs])
                entry[f"mean_{key}"] = float(v.mean())
                entry[f"sem_{key}"] = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
            d = np.array([r.rates["grid_concur"] - r.rates["grid_base"] for r in rs])
            entry["mean_grid_diff"] = float(d.mean())
            entry["sem_grid_diff"] = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
            summ.append(entry)
    return rows, {"splits": _table(rows), "summary": _dict_table(summ)}, {"points": summ}


def _sweep_job(args):
    cfg, pen, alpha = args
    system = system_for(cfg, pen, alpha)
    grid, netdc = system.grid, system.netdc
    r_bar = _r_bar(cfg, grid)
    t0 = time.perf_counter()
    recs = _records(cfg, system)
    train, test = split_records(recs, int(cfg.qs[0]), cfg.seed)
    tset = TrainingSet(train, schema=system.schema)
    table = sweep_epsilon(tset, grid, netdc, cfg.epsilons, r_bar, test, gap_tol=cfg.gap_tol,
                          node_limit=cfg.node_limit)
    none = _mean(noncoordinated_cost(r, grid, netdc, r_bar) for r in test)
    names = system.schema.names()
    rows, sel = [], []
    for t in table:
        act = t.policy.active_features(ACTIVE_TOL)
        rows.append(ReportRow("epsilon_sweep", {"penetration": pen, "alpha": alpha, "eps": t.eps,
                                                "active": t.active, "l1": t.policy.l1_norm()},
                              {"none": none, "concur": t.avg_test_cost, "concur_training": t.train_cost}, {},
                              {"nodes": t.report.nodes, "gap": t.report.gap, "status": t.report.status}))
        sel.append((pen, alpha, t.eps) + tuple(int(i in set(act.tolist())) for i in range(len(names))))
    for r in rows:
        r.wall_time = (time.perf_counter() - t0) / len(rows)
    return rows, sel, names


def run_sweep(cfg, pool):
    out = pool(_sweep_job, [(cfg, p, a) for p in cfg.penetrations for a in cfg.alphas])
    rows = [r for rs, _, _ in out for r in rs]
    names = out[0][2]
    sel = [x for _, s, _ in out for x in s]
    tables = {"costs": _table(rows), "features": (["penetration", "alpha", "eps"] + names, sel)}
    return rows, tables, {"rows": [r.flat() for r in rows]}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------
RUNNERS = {"day_ahead": run_day_ahead, "policy_compare": run_policy_compare,
           "feasibility_vs_q": run_feasibility, "epsilon_sweep": run_sweep}


def _mean(it):
    v = list(it)
    return float(np.mean(v)) if v else float("nan")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _table(rows):
    cols = []
    for r in rows:
        for k in r.flat():
            if k not in cols:
                cols.append(k)
    return cols, [[r.flat().get(c, "") for c in cols] for r in rows]


def _dict_table(dicts):
    cols = []
    for d in dicts:
        for k in d:
            if k not in cols:
                cols.append(k)
    return cols, [[d.get(c, "") for c in cols] for d in dicts]


def write_csv(path, cols, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(REPORT_HEADER + "\n")
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else None
    return v


def _pool(workers):
    def run(fn, jobs):
        if workers <= 1 or len(jobs) <= 1:
            return [fn(j) for j in jobs]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return run


def run_experiment(cfg: ExperimentConfig, output=None, workers=None):
    """Run one experiment; returns (rows, list of written report paths)."""
    out = output if output is not None else cfg.output
    if not os.path.isabs(out) and cfg.source:
        out = os.path.join(os.path.dirname(os.path.abspath(cfg.source)), out)
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    rows, tables, summary = RUNNERS[cfg.kind](cfg, _pool(cfg.workers if workers is None else workers))
    paths = []
    for name, (cols, data) in tables.items():
        p = os.path.join(out, f"{cfg.kind}_{name}.csv")
        write_csv(p, cols, data)
        paths.append(p)
    doc = {"format": "dccoord-report", "version": 1, "kind": cfg.kind, "config_digest": cfg.digest(),
           "seed": cfg.seed, "files": [os.path.basename(p) for p in paths], "summary": summary}
    p = os.path.join(out, f"{cfg.kind}_summary.json")
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(doc), fh, indent=1, sort_keys=True)
        fh.write("\n")
    paths.append(p)
    timing = {"total_s": time.perf_counter() - t0, "rows_s": [r.wall_time for r in rows]}
    with open(os.path.join(out, f"{cfg.kind}_timing.json"), "w", encoding="utf-8") as fh:
        json.dump(timing, fh, indent=1)
        fh.write("\n")
    return rows, paths
