"""Branch-and-bound over binaries and SOS1 complementarity pairs.

A :class:`MixedIntegerKktProblem` is a convex QP plus

* ``binaries``: variable indices restricted to {0, 1};
* ``sos1``: pairs of members of which at most one may be nonzero.  A member is
  ``("x", j)`` (variable j, which must have lb <= 0) or ``("row", r)`` (the
  slack ``b_in[r] - A_in[r] @ x`` of inequality row r).  Fixing a member to
  zero sets the variable bounds to 0 or turns the row into an equality.

Optionally the trailing ``n_deferred_vars`` variables and trailing
``n_deferred_eq`` equality rows (the follower duals and stationarity rows)
form a deferred block.  Dropping it only removes constraints, so relaxations
without it are valid bounds.  While the block is off, nodes with integral
binaries are closed through ``repair``: a callback that maps a reduced
solution to a full feasible point (typically by solving the follower problem
for the leader's decision).  If the repaired point does not reach the node
bound or breaks a branching fix, the node is re-solved with the block on and
SOS1 branching proceeds as usual.
"""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import kernels
from .qp import INFEASIBLE, OPTIMAL, QuadraticProgram, solve_qp

INT_TOL = 1e-6
SOS_TOL = 1e-9


class NodeLimitExceeded(RuntimeError):
    """Search stopped at the node limit; carries the best incumbent and gap."""

    def __init__(self, message, x, report):
        super().__init__(message)
        self.x = x
        self.report = report


@dataclass
class MixedIntegerKktProblem:
    qp: QuadraticProgram
    binaries: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    sos1: tuple = ()
    n_deferred_vars: int = 0
    n_deferred_eq: int = 0
    repair: Optional[Callable] = None
    initial: Optional[np.ndarray] = None
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.binaries = np.asarray(self.binaries, dtype=int).reshape(-1)
        pairs = []
        for a, b in self.sos1:
            pairs.append((_member(a), _member(b)))
        self.sos1 = tuple(pairs)
        qp = self.qp
        b = self.binaries
        if b.size and (np.any(qp.lb[b] < 0.0) or np.any(qp.ub[b] > 1.0)):
            lb, ub = qp.lb.copy(), qp.ub.copy()
            lb[b] = np.maximum(lb[b], 0.0)
            ub[b] = np.minimum(ub[b], 1.0)
            self.qp = qp = qp.with_bounds(lb, ub)
        for pair in self.sos1:
            for kind, j in pair:
                if kind == "x" and not (qp.lb[j] <= 0.0 <= qp.ub[j]):
                    raise ValueError(f"SOS1 member x[{j}] cannot be fixed to zero")
                if kind == "row" and not 0 <= j < qp.m_in:
                    raise ValueError(f"SOS1 row member {j} out of range")
        if self.n_deferred_vars:
            tail = qp.A_in[:, qp.n - self.n_deferred_vars:]
            if tail.nnz:
                raise ValueError("deferred variables may not appear in inequality rows")
            head = qp.A_eq[:qp.m_eq - self.n_deferred_eq, qp.n - self.n_deferred_vars:]
            if head.nnz:
                raise ValueError("deferred variables may only appear in deferred equality rows")

    @property
    def n_patterns(self):
        return self.binaries.size + len(self.sos1)

    def member_values(self, x):
        """Values of every SOS1 member at ``x`` as an (npairs, 2) array."""
        out = np.zeros((len(self.sos1), 2))
        if not self.sos1:
            return out
        slack = self.qp.b_in - self.qp.A_in @ x if self.qp.m_in else np.zeros(0)
        for p, pair in enumerate(self.sos1):
            for s, (kind, j) in enumerate(pair):
                out[p, s] = x[j] if kind == "x" else slack[j]
        return out

    def sos1_products(self, x):
        v = self.member_values(x)
        if v.shape[0] == 0:
            return np.zeros(0)
        return kernels.complementarity(np.ascontiguousarray(v[:, 0]), np.ascontiguousarray(v[:, 1]))

    def is_feasible(self, x, tol=1e-6):
        """Full-point feasibility: constraints, integrality and complementarity."""
        if x is None or x.shape[0] != self.qp.n:
            return False
        scale = 1.0 + float(np.max(np.abs(x), initial=0.0))
        if self.qp.max_violation(x) > tol * scale:
            return False
        b = x[self.binaries]
        if np.any(np.minimum(np.abs(b), np.abs(1.0 - b)) > INT_TOL):
            return False
        return bool(np.all(self.sos1_products(x) <= 1e-8 * scale))


def _member(m):
    kind, j = m
    if kind not in ("x", "row"):
        raise ValueError(f"unknown SOS1 member kind {kind!r}")
    return (kind, int(j))


@dataclass
class BnbReport:
    objective: float
    nodes: int
    max_depth: int
    gap: float
    wall_time: float
    status: str = OPTIMAL
    bound: float = -np.inf
    qp_solves: int = 0


@dataclass
class _Node:
    depth: int
    lb: np.ndarray
    ub: np.ndarray
    fixed_rows: tuple
    block_on: bool
    x0: Optional[np.ndarray] = None
    hint: Optional[tuple] = None
    branch: str = "root"


class _Search:
    def __init__(self, prob, gap_tol, node_limit, trace, heuristic_every):
        self.p = prob
        self.gap_tol = gap_tol
        self.node_limit = node_limit
        self.trace = trace
        self.heuristic_every = heuristic_every
        self.best_x = None
        self.best_obj = np.inf
        self.qp_solves = 0
        qp = prob.qp
        self.n_full = qp.n
        self.n_red = qp.n - prob.n_deferred_vars
        self.meq_red = qp.m_eq - prob.n_deferred_eq
        self.has_block = prob.n_deferred_vars > 0 or prob.n_deferred_eq > 0

    # -- relaxations ---------------------------------------------------------
    def node_qp(self, node):
        qp = self.p.qp
        if node.block_on or not self.has_block:
            n, me = self.n_full, qp.m_eq
        else:
            n, me = self.n_red, self.meq_red
        H = qp.H[:n][:, :n]
        A_eq = qp.A_eq[:me][:, :n]
        b_eq = qp.b_eq[:me]
        A_in = qp.A_in[:, :n]
        if node.fixed_rows:
            rows = np.array(node.fixed_rows, dtype=int)
            A_eq = sp.vstack([A_eq, A_in[rows]], format="csr")
            b_eq = np.concatenate([b_eq, qp.b_in[rows]])
        return QuadraticProgram(H, qp.c[:n], A_eq, b_eq, A_in, qp.b_in, node.lb[:n], node.ub[:n], qp.constant)

    def solve(self, node):
        prob = self.node_qp(node)
        x0 = hint = None
        if node.x0 is not None and node.x0.shape[0] == prob.n:
            x0 = node.x0
            hint = node.hint
        self.qp_solves += 1
        sol = solve_qp(prob, x0=x0, hint=hint)
        if sol.status != OPTIMAL and x0 is not None:
            self.qp_solves += 1
            sol = solve_qp(prob)
        return sol

    # -- incumbents ----------------------------------------------------------
    def offer(self, x):
        if x is None or not self.p.is_feasible(x):
            return False
        obj = self.p.qp.objective(x)
        if obj < self.best_obj - 1e-12 * max(1.0, abs(obj)):
            self.best_obj = obj
            self.best_x = x.copy()
            return True
        return False

    def respects(self, x, node):
        tol = 1e-7 * (1.0 + float(np.max(np.abs(x), initial=0.0)))
        if np.any(x < node.lb - tol) or np.any(x > node.ub + tol):
            return False
        if node.fixed_rows:
            rows = np.array(node.fixed_rows, dtype=int)
            slack = self.p.qp.b_in[rows] - self.p.qp.A_in[rows] @ x
            if np.any(np.abs(slack) > tol):
                return False
        return True

    def try_repair(self, xr, node):
        if self.p.repair is None:
            return None
        x = self.p.repair(xr)
        if x is None or not self.respects(x, node):
            return None
        return x

    def rounding(self, node, xr):
        """Fix every binary at its rounded-up value and offer the result."""
        b = self.p.binaries
        vals = xr[b]
        lb, ub = node.lb.copy(), node.ub.copy()
        up = np.where(vals > INT_TOL, 1.0, 0.0)
        up = np.clip(up, node.lb[b], node.ub[b])
        lb[b] = up
        ub[b] = up
        child = _Node(node.depth, lb, ub, node.fixed_rows, node.block_on, xr, None, "round")
        sol = self.solve(child)
        if sol.status != OPTIMAL or sol.objective >= self.best_obj:
            return
        if node.block_on or not self.has_block:
            if not self.p.sos1 or np.all(self.p.sos1_products(sol.x) <= SOS_TOL):
                self.offer(sol.x)
        else:
            self.offer(self.try_repair(sol.x, child))

    # -- main loop -----------------------------------------------------------
    def run(self):
        p = self.p
        t0 = time.perf_counter()
        qp = p.qp
        if p.initial is not None:
            self.offer(np.asarray(p.initial, dtype=float))
        root = _Node(0, qp.lb.copy(), qp.ub.copy(), (), not (self.has_block and p.repair is not None))
        seq = itertools.count()
        heap = [(-np.inf, next(seq), root)]
        nodes = 0
        max_depth = 0
        status = OPTIMAL
        while heap:
            bound, _, node = heapq.heappop(heap)
            if bound >= self.best_obj - self.gap_tol:
                heap.clear()
                break
            if nodes >= self.node_limit:
                heapq.heappush(heap, (bound, -1, node))
                status = "node_limit"
                break
            nodes += 1
            max_depth = max(max_depth, node.depth)
            sol = self.solve(node)
            if sol.status != OPTIMAL:
                self._log(nodes, node, np.inf, "infeasible" if sol.status == INFEASIBLE else sol.status)
                continue
            nb = max(bound, sol.objective)
            if nb >= self.best_obj - self.gap_tol:
                self._log(nodes, node, nb, "pruned")
                continue
            x = sol.x
            hint = (sol.active_in, sol.bound_state)
            b = p.binaries
            idx = -1
            if b.size:
                idx, _ = kernels.most_fractional(np.ascontiguousarray(x[b]), INT_TOL)
            if idx >= 0:
                if self.heuristic_every and (nodes == 1 or nodes % self.heuristic_every == 0):
                    self.rounding(node, x)
                j = int(b[idx])
                self._log(nodes, node, nb, f"u[{j}]={x[j]:.6g}")
                for val in (0.0, 1.0):
                    lb, ub = node.lb.copy(), node.ub.copy()
                    lb[j] = ub[j] = val
                    child = _Node(node.depth + 1, lb, ub, node.fixed_rows, node.block_on, x, hint,
                                  f"x[{j}]={val:g}")
                    heapq.heappush(heap, (nb, next(seq), child))
                continue
            if self.has_block and not node.block_on:
                xf = self.try_repair(x, node)
                if xf is not None and p.is_feasible(xf):
                    self.offer(xf)
                    if p.qp.objective(xf) <= nb + self.gap_tol:
                        self._log(nodes, node, nb, "repaired")
                        continue
                # re-solve the node with the deferred block switched on
                on = _Node(node.depth, node.lb, node.ub, node.fixed_rows, True, None, None, node.branch)
                heapq.heappush(heap, (nb, next(seq), on))
                self._log(nodes, node, nb, "block-on")
                continue
            prods = p.sos1_products(x)
            if prods.size == 0 or float(np.max(prods)) <= SOS_TOL:
                self.offer(x)
                self._log(nodes, node, nb, "integral")
                continue
            k = int(np.argmax(prods))
            self._log(nodes, node, nb, f"sos1[{k}]={prods[k]:.3g}")
            for kind, j in p.sos1[k]:
                lb, ub = node.lb.copy(), node.ub.copy()
                rows = node.fixed_rows
                if kind == "x":
                    lb[j] = ub[j] = 0.0
                else:
                    rows = rows + (j,)
                child = _Node(node.depth + 1, lb, ub, rows, True, x, None, f"{kind}[{j}]=0")
                heapq.heappush(heap, (nb, next(seq), child))
        open_bound = min((h[0] for h in heap), default=np.inf)
        best_bound = min(open_bound, self.best_obj)
        gap = max(0.0, self.best_obj - best_bound) if np.isfinite(self.best_obj) else np.inf
        if status == OPTIMAL and not np.isfinite(self.best_obj):
            status = INFEASIBLE
        rep = BnbReport(self.best_obj, nodes, max_depth, gap, time.perf_counter() - t0, status,
                        best_bound, self.qp_solves)
        return self.best_x, rep

    def _log(self, k, node, bound, what):
        if self.trace is not None:
            self.trace.write(f"{k} depth={node.depth} bound={bound:.10g} branch={node.branch} -> {what}\n")


def branch_and_bound(problem, gap_tol=1e-6, node_limit=10**6, trace=None, heuristic_every=20,
                     raise_on_limit=True):
    """Best-first branch-and-bound.  Returns ``(x, BnbReport)``.

    ``x`` is ``None`` when the problem is infeasible.  Equal bounds are
    explored in creation order, so the search is deterministic.  ``trace`` is
    an optional text stream receiving one line per node.
    """
    search = _Search(problem, gap_tol, node_limit, trace, heuristic_every)
    x, rep = search.run()
    if rep.status == "node_limit" and raise_on_limit:
        raise NodeLimitExceeded(f"node limit {node_limit} reached (gap {rep.gap:.3g})", x, rep)
    return x, rep


def brute_force_oracle(problem, max_patterns=18):
    """Exact optimum by enumerating binary values and SOS1 sides.

    Returns ``(objective, x)``; objective is ``inf`` and x ``None`` when every
    pattern is infeasible.
    """
    nb, ns = problem.binaries.size, len(problem.sos1)
    if nb + ns > max_patterns:
        raise ValueError(f"brute_force_oracle: {nb + ns} patterns exceed the guard of {max_patterns}")
    qp = problem.qp
    best, best_x = np.inf, None
    for bits in itertools.product((0.0, 1.0), repeat=nb):
        for sides in itertools.product((0, 1), repeat=ns):
            lb, ub = qp.lb.copy(), qp.ub.copy()
            lb[problem.binaries] = bits
            ub[problem.binaries] = bits
            rows = []
            for pair, s in zip(problem.sos1, sides):
                kind, j = pair[s]
                if kind == "x":
                    lb[j] = ub[j] = 0.0
                else:
                    rows.append(j)
            A_eq, b_eq = qp.A_eq, qp.b_eq
            if rows:
                A_eq = sp.vstack([A_eq, qp.A_in[rows]], format="csr")
                b_eq = np.concatenate([b_eq, qp.b_in[rows]])
            sol = solve_qp(QuadraticProgram(qp.H, qp.c, A_eq, b_eq, qp.A_in, qp.b_in, lb, ub, qp.constant))
            if sol.status == OPTIMAL and sol.objective < best:
                best, best_x = sol.objective, sol.x
    return best, best_x
