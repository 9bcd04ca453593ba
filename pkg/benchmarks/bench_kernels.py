"""Compiled vs numpy kernels, plus an end-to-end QP solve under each setting.

Usage: python benchmarks/bench_kernels.py [--repeat N]

The end-to-end part runs the same solve in two subprocesses, one with
DCCOORD_DISABLE_JIT=1, because the switch is read at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dccoord import kernels


def _cases(rng):
    n = 4000
    slack = rng.uniform(0.0, 1.0, n)
    rate = rng.normal(0.0, 1.0, n)
    blocked = rng.random(n) < 0.3
    mult = rng.normal(0.0, 1.0, n)
    vals = rng.random(n)
    a, b = rng.random(n), rng.random(n)
    return {
        "ratio_test": (kernels.ratio_test_jit, kernels.ratio_test_np, (slack, rate, blocked, 1e-12)),
        "select_drop": (kernels.select_drop_jit, kernels.select_drop_np, (mult, 1e-9, False)),
        "most_fractional": (kernels.most_fractional_jit, kernels.most_fractional_np, (vals, 1e-6)),
        "complementarity": (kernels.complementarity_jit, kernels.complementarity_np, (a, b)),
        "incidence(5,24)": (kernels.incidence_jit, kernels.incidence_np, (5, 24)),
    }


E2E = """
import time
from dccoord.synth import nyiso_system
from dccoord.bilevel import solve_uc
from dccoord.lower import latency_optimal_allocation
s = nyiso_system(0, n_scenarios=1)
sc = s.scenarios[0]
th = latency_optimal_allocation(s.netdc, sc.compute_demand).theta
solve_uc(s.grid, sc.loads[:1], sc.renewables[:1], th[:1], s.netdc)
t = time.perf_counter()
r = solve_uc(s.grid, sc.loads, sc.renewables, th, s.netdc)
print(time.perf_counter() - t, repr(r.cost))
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numba us':>12}{'numpy us':>12}{'speedup':>10}  same")
    for name, (fj, fn, a) in _cases(rng).items():
        fj(*a)  # compile
        tj = min(timeit.repeat(lambda: fj(*a), number=args.repeat, repeat=3)) / args.repeat * 1e6
        tn = min(timeit.repeat(lambda: fn(*a), number=args.repeat, repeat=3)) / args.repeat * 1e6
        rj, rn = fj(*a), fn(*a)
        same = all(np.array_equal(np.asarray(x), np.asarray(y)) for x, y in zip(np.atleast_1d(rj), np.atleast_1d(rn))) \
            if isinstance(rj, tuple) else np.array_equal(rj, rn)
        print(f"{name:<18}{tj:>12.2f}{tn:>12.2f}{tn / tj:>10.1f}  {same}")
    if args.skip_e2e:
        return
    print("\nNYISO-like unit commitment (b=11, tau=5):")
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, DCCOORD_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        t, cost = out.stdout.split()
        print(f"  {label:<6} {float(t):8.3f} s  cost {cost}")


if __name__ == "__main__":
    main()
