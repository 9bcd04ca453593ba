"""Command-line entry point.

Exit codes: 0 success, 1 config/model error, 2 solver limit reached, 3 I/O error.
The default output root is ``$DCCOORD_OUTPUT`` (else ``./dccoord-out``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .bnb import NodeLimitExceeded
from .fileio import (ConfigError, load_experiment, load_policy, load_records, load_system, save_policy, save_records,
                     save_scenarios, save_system)
from .model import FeatureSchema, ModelError, build_incidence

EXIT_OK, EXIT_CONFIG, EXIT_LIMIT, EXIT_IO = 0, 1, 2, 3
OUTPUT_ENV = "DCCOORD_OUTPUT"
PRESETS = {"toy": dict(n_zones=3, n_dc=2, horizon=1), "nyiso": dict(n_zones=11, n_dc=5, horizon=5)}

log = logging.getLogger("dccoord")


class SolverLimit(RuntimeError):
    pass


def _out_root(args):
    root = args.output or os.environ.get(OUTPUT_ENV) or "dccoord-out"
    os.makedirs(root, exist_ok=True)
    return root


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _floats(a):
    return np.asarray(a, dtype=float).tolist()


def _system(args):
    from .experiments import system_for
    from .fileio import ExperimentConfig

    cfg = ExperimentConfig(os.path.abspath(args.system), "day_ahead", [args.alpha])
    sf = load_system(cfg.system, load_scenarios_file=False)
    pen = args.penetration if args.penetration is not None else (sf.generator or {}).get("penetration", 0.2)
    return system_for(cfg, pen, args.alpha if args.alpha is not None else sf.netdc.latency_loss_cap)


def _r_bar(args, grid):
    return grid.redispatch_limit * args.r_bar_scale


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_generate(args):
    from .synth import generate_system, make_records

    params = dict(PRESETS.get(args.preset, {}))
    if args.zones is not None:
        params["n_zones"] = args.zones
    if args.dcs is not None:
        params["n_dc"] = args.dcs
    if args.horizon is not None:
        params["horizon"] = args.horizon
    params.setdefault("n_zones", 6)
    params.setdefault("n_dc", 3)
    params.setdefault("horizon", 1)
    system = generate_system(args.seed, penetration=args.penetration, n_scenarios=args.scenarios,
                             alpha=args.alpha, **params)
    root = _out_root(args)
    save_scenarios(os.path.join(root, "scenarios.csv"), system.scenarios)
    save_system(os.path.join(root, "system.yaml"), system.grid, system.netdc, params["horizon"], system.params,
                "scenarios.csv")
    if args.records:
        recs = make_records(system, args.records, seed=args.seed)
        save_records(os.path.join(root, "records.csv"), recs)
    print(f"wrote system ({system.grid.n_buses} zones, {system.netdc.n_dc} data centers, "
          f"{len(system.scenarios)} scenarios) to {root}")


def cmd_solve_da(args):
    from .bilevel import solve_day_ahead, solve_uc
    from .lower import latency_optimal_allocation

    system = _system(args)
    grid, netdc = system.grid, system.netdc
    scen = system.scenarios[args.scenario]
    topo = build_incidence(netdc.n_dc, scen.horizon)
    alloc = latency_optimal_allocation(netdc, scen.compute_demand)
    base = solve_uc(grid, scen.loads, scen.renewables, alloc.theta, netdc, gap_tol=args.gap_tol,
                    node_limit=args.node_limit)
    trace = open(args.trace, "w", encoding="utf-8") if args.trace else None
    try:
        da = solve_day_ahead(grid, netdc, topo, scen, gap_tol=args.gap_tol, node_limit=args.node_limit,
                             trace=trace, W_dot=alloc.W)
    except NodeLimitExceeded as e:
        raise SolverLimit(f"node limit reached: best {e.report.objective}, gap {e.report.gap}") from e
    finally:
        if trace:
            trace.close()
    rep = da.report
    out = {"scenario": scen.name, "cost_none": base.cost, "cost_day_ahead": da.cost, "saving": base.cost - da.cost,
           "phi": _floats(da.phi), "theta_none": _floats(alloc.theta), "theta": _floats(da.theta),
           "u": _floats(np.round(da.u)), "p": _floats(da.p),
           "bnb": {"nodes": rep.nodes, "max_depth": rep.max_depth, "gap": rep.gap, "status": rep.status}}
    path = os.path.join(_out_root(args), f"day_ahead_{scen.name}.json")
    _write_json(path, out)
    print(f"{scen.name}: non-coordinated {base.cost:.2f}  day-ahead {da.cost:.2f}  saving {base.cost - da.cost:.2f}"
          f"  ({rep.nodes} nodes, {rep.wall_time:.1f} s) -> {path}")


def _records(args, system):
    recs = load_records(args.records, system.grid.n_buses, system.netdc.n_users)
    if any(r.features is None or r.day_ahead_dispatch is None for r in recs):
        raise ModelError(f"{args.records}: records need features and a day-ahead dispatch")
    return recs


def cmd_train(args):
    from .policy import prepare_training_set, split_records, train_base, train_concur

    system = _system(args)
    grid, netdc = system.grid, system.netdc
    recs = _records(args, system)
    train, _ = split_records(recs, args.q or len(recs), args.seed)
    r_bar = _r_bar(args, grid)
    schema = FeatureSchema.for_grid(grid.n_buses, grid.n_lines)
    incl = not args.exclude_intercept
    if args.method == "base":
        tset = prepare_training_set(train, grid, netdc, r_bar, schema=schema)
        spec = train_base(tset, args.eps, incl)
        msg = f"base policy, |beta|_1 = {spec.l1_norm():.6g}"
    else:
        tset = prepare_training_set(train, grid, netdc, r_bar, with_targets=False, schema=schema)
        spec, costs, rep = train_concur(tset, grid, netdc, args.eps, r_bar, incl, args.gap_tol, args.node_limit)
        if rep.status != "optimal":
            save_policy(args.policy or os.path.join(_out_root(args), "policy.json"), spec)
            raise SolverLimit(f"node limit reached (gap {rep.gap}); incumbent policy saved")
        msg = f"concur policy, avg training cost {np.mean(costs):.2f}, |beta|_1 = {spec.l1_norm():.6g}"
    path = args.policy or os.path.join(_out_root(args), "policy.json")
    save_policy(path, spec)
    print(f"{msg} -> {path}")


def cmd_evaluate(args):
    from .policy import coordinate_rt, noncoordinated_cost

    system = _system(args)
    grid, netdc = system.grid, system.netdc
    recs = _records(args, system)
    spec = load_policy(args.policy)
    if spec.n_features != recs[0].features.shape[0]:
        raise ModelError("policy feature count does not match the records")
    r_bar = _r_bar(args, grid)
    rows = []
    for r in recs:
        o = coordinate_rt(spec, r, grid, netdc, r_bar)
        rows.append([r.name, o.branch, int(o.netdc_ok), int(o.opf_ok), repr(o.cost),
                     repr(noncoordinated_cost(r, grid, netdc, r_bar))])
    path = os.path.join(_out_root(args), "evaluation.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# dccoord-report v1\nrecord,branch,netdc_ok,opf_ok,cost,cost_none\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")
    n = len(rows)
    print(f"{n} records: policy applied on {sum(r[1] == 'policy' for r in rows)}, avg cost "
          f"{np.mean([float(r[4]) for r in rows]):.2f} vs none {np.mean([float(r[5]) for r in rows]):.2f} -> {path}")


def cmd_sweep(args):
    from .experiments import write_csv
    from .policy import TrainingSet, split_records, sweep_epsilon

    system = _system(args)
    grid, netdc = system.grid, system.netdc
    recs = _records(args, system)
    train, test = split_records(recs, args.q or len(recs), args.seed)
    schema = FeatureSchema.for_grid(grid.n_buses, grid.n_lines)
    table = sweep_epsilon(TrainingSet(train, schema=schema), grid, netdc, args.eps, _r_bar(args, grid),
                          test or train, gap_tol=args.gap_tol, node_limit=args.node_limit)
    path = os.path.join(_out_root(args), "epsilon_sweep.csv")
    write_csv(path, ["eps", "active", "l1", "avg_test_cost", "avg_train_cost", "status"],
              [[t.eps, t.active, t.policy.l1_norm(), t.avg_test_cost, t.train_cost, t.report.status] for t in table])
    for t in table:
        print(f"eps {t.eps:g}: {t.active} active features, avg test cost {t.avg_test_cost:.2f}")
    print(f"-> {path}")
    if any(t.report.status != "optimal" for t in table):
        raise SolverLimit("node limit reached in at least one training run")


def cmd_report(args):
    from .experiments import run_experiment

    cfg = load_experiment(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.gap_tol is not None:
        cfg.gap_tol = args.gap_tol
    if args.node_limit is not None:
        cfg.node_limit = args.node_limit
    out = args.output or (os.path.join(os.environ[OUTPUT_ENV], cfg.kind) if os.environ.get(OUTPUT_ENV) else None)
    rows, paths = run_experiment(cfg, out, args.workers)
    for p in paths:
        print(p)
    limits = sum(r.bnb.get("status") == "node_limit" for r in rows)
    if limits:
        raise SolverLimit(f"{limits} rows hit the node limit (recorded in the report)")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def _solver_flags(p, gap=1e-6):
    p.add_argument("--gap-tol", type=float, default=gap, help="absolute branch-and-bound gap")
    p.add_argument("--node-limit", type=int, default=10**6)


def _system_flags(p):
    p.add_argument("--system", required=True, help="system YAML written by 'generate'")
    p.add_argument("--alpha", type=float, default=None, help="latency loss cap (default: from the system file)")
    p.add_argument("--penetration", type=float, default=None)


def _policy_flags(p):
    _system_flags(p)
    p.add_argument("--records", required=True, help="records CSV")
    p.add_argument("--r-bar-scale", type=float, default=1.0, help="multiplier on the re-dispatch limits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--q", type=int, default=None, help="training records (default: all)")


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; exit code 2 is reserved for solver limits
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", "-o", default=argparse.SUPPRESS,
                        help=f"output directory (default ${OUTPUT_ENV} or ./dccoord-out)")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="worker processes for experiment rows")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    ap = _Parser(prog="dccoord", description=__doc__.splitlines()[0], parents=[common])
    ap.add_argument("--version", action="version", version=f"dccoord {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic system, its scenarios and optional records")
    p.add_argument("--preset", choices=["toy", "nyiso", "random"], default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--penetration", type=float, default=0.2)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--scenarios", type=int, default=20)
    p.add_argument("--records", type=int, default=0, help="also write this many single-period records")
    p.add_argument("--zones", type=int, default=None)
    p.add_argument("--dcs", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("solve-da", parents=[common], help="day-ahead bilevel for one scenario")
    _system_flags(p)
    p.add_argument("--scenario", type=int, default=0)
    p.add_argument("--trace", default=None, help="write one line per branch-and-bound node")
    _solver_flags(p)
    p.set_defaults(fn=cmd_solve_da)

    p = sub.add_parser("train", parents=[common], help="train a base or concur policy")
    _policy_flags(p)
    p.add_argument("--method", choices=["base", "concur"], default="concur")
    p.add_argument("--eps", type=float, required=True, help="L1 budget")
    p.add_argument("--exclude-intercept", action="store_true", help="leave the intercept out of the L1 budget")
    p.add_argument("--policy", default=None, help="output policy JSON")
    _solver_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="apply a policy with the real-time rule")
    _policy_flags(p)
    p.add_argument("--policy", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="concur training over L1 budgets")
    _policy_flags(p)
    p.add_argument("--eps", type=float, nargs="+", required=True)
    _solver_flags(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="run an experiment config and write its reports")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--gap-tol", type=float, default=None)
    p.add_argument("--node-limit", type=int, default=None)
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    for key, val in (("output", None), ("workers", None), ("verbose", False)):
        if not hasattr(args, key):
            setattr(args, key, val)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (ConfigError, ModelError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverLimit, NodeLimitExceeded) as e:
        print(f"solver limit: {e}", file=sys.stderr)
        return EXIT_LIMIT
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
