"""Grid-side problems and their exact bilevel coupling with the data-center operator.

* :func:`solve_uc` - unit commitment / dispatch for a fixed data-center loading.
* :func:`solve_day_ahead` - commitment, dispatch and task shifts with the
  operator's re-allocation problem embedded through its KKT system.
* :func:`solve_single_period_ideal` - per-scenario optimal shift around a fixed
  day-ahead dispatch, with bounded re-dispatch.
* :func:`dispatch_rt` / :func:`min_shedding` - real-time dispatch QP and the
  zero-shedding screen for a given loading.

Every bilevel model is a :class:`~dccoord.bnb.MixedIntegerKktProblem` whose
deferred block holds the follower duals and stationarity rows.  Because the
leader only sees the follower through theta_tilde = theta_dot + A phi, any
integral leader point is completed exactly by solving the follower for its phi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bnb import BnbReport, MixedIntegerKktProblem, branch_and_bound
from .build import QpBuilder
from .lower import AllocationResult, block_qp, block_result, latency_optimal_allocation, lower_block
from .model import ModelError, build_incidence
from .qp import OPTIMAL, solve_qp


# ---------------------------------------------------------------------------
# shared row builders
# ---------------------------------------------------------------------------
def _network_rows(B, grid, terms, const):
    """Balance and flow-limit rows for net injection sum_k M_k x[cols_k] + const (per bus)."""
    F = grid.ptdf
    one = np.ones((1, grid.n_buses))
    bal = B.add_eq([(one @ M, cols) for M, cols in terms], [-float(np.sum(const))])
    cap = grid.line_cap
    up = B.add_in([(F @ M, cols) for M, cols in terms], cap - F @ const)
    dn = B.add_in([(-F @ M, cols) for M, cols in terms], cap + F @ const)
    return int(bal[0]), up, dn


def _uc_vars_rows(B, grid, loads, renewables, u0, p0, dc_term):
    """Commitment/dispatch block.  ``dc_term(t)`` returns (terms, const) for the DC injection at hour t."""
    tau, b = loads.shape
    I = np.eye(b)
    p = B.add_vars("p", (tau, b), lb=0.0, ub=np.broadcast_to(grid.gen_max, (tau, b)))
    ell = B.add_vars("ell", (tau, b), lb=0.0, ub=loads, cost=np.broadcast_to(grid.shed_cost, (tau, b)))
    cup = B.add_vars("cup", (tau, b), lb=0.0, cost=1.0)
    u_ub = np.broadcast_to(np.where(grid.gen_max > 0, 1.0, 0.0), (tau, b))
    u = B.add_vars("u", (tau, b), lb=0.0, ub=u_ub)
    C2 = 2.0 * grid.gen_cost_quad
    rows = {"bal": [], "up": [], "dn": []}
    for t in range(tau):
        B.add_linear(p[t], grid.gen_cost_lin)
        B.add_quad(p[t], p[t], C2)
        terms, const = dc_term(t)
        bal, up, dn = _network_rows(B, grid, [(I, p[t]), (I, ell[t])] + terms,
                                    const + renewables[t] - loads[t])
        rows["bal"].append(bal)
        rows["up"].append(up)
        rows["dn"].append(dn)
        # output limits
        B.add_in([(I, p[t]), (-np.diag(grid.gen_max), u[t])], np.zeros(b))
        B.add_in([(-I, p[t]), (np.diag(grid.gen_min), u[t])], np.zeros(b))
        # startup cost
        con = np.diag(grid.startup_cost)
        if t == 0:
            B.add_in([(con, u[t]), (-I, cup[t])], grid.startup_cost * u0)
        else:
            B.add_in([(con, u[t]), (-con, u[t - 1]), (-I, cup[t])], np.zeros(b))
        # ramps
        pmax = grid.gen_max
        Du = np.diag(pmax - grid.startup_ramp)
        Dup = np.diag(grid.startup_ramp - grid.ramp_up)
        Dd = np.diag(grid.shutdown_ramp - grid.ramp_dn)
        Ddp = np.diag(pmax - grid.shutdown_ramp)
        if t > 0:
            B.add_in([(I, p[t]), (-I, p[t - 1]), (Du, u[t]), (Dup, u[t - 1])], pmax)
            B.add_in([(-I, p[t]), (I, p[t - 1]), (Dd, u[t]), (Ddp, u[t - 1])], pmax)
        elif p0 is not None:
            B.add_in([(I, p[t]), (Du, u[t])], pmax + p0 - (grid.startup_ramp - grid.ramp_up) * u0)
            B.add_in([(-I, p[t]), (Dd, u[t])], pmax - p0 - (pmax - grid.shutdown_ramp) * u0)
    return rows


def _add_follower(B, block, phi, tag=""):
    """Follower primal variables, conservation rows and latency cap rows."""
    xl = B.add_vars("ll" + tag, block.nx, lb=block.lb, ub=block.ub)
    B.add_eq([(block.E, xl), (block.Ephi, phi)], block.e)
    cap = B.add_in([(block.Cin, xl)], block.cin)
    return xl, cap


def _add_follower_kkt(B, block, xl, cap_rows, tag=""):
    """Deferred block: follower duals (trailing variables) and stationarity (trailing rows)."""
    y = B.add_vars("mu_eq" + tag, block.E.shape[0])
    zc = B.add_vars("mu_cap" + tag, block.tau, lb=0.0)
    iw = block.iw.reshape(-1)
    zw = B.add_vars("mu_w" + tag, iw.size, lb=0.0)
    P = sp.csr_matrix((np.ones(iw.size), (iw, np.arange(iw.size))), shape=(block.nx, iw.size))
    B.add_eq([(block.Q, xl), (block.E.T, y), (block.Cin.T, zc), (-P, zw)], -block.q)
    sos = [(("x", int(zw[v])), ("x", int(xl[iw[v]]))) for v in range(iw.size)]
    sos += [(("x", int(zc[t])), ("row", int(cap_rows[t]))) for t in range(block.tau)]
    n_def = block.E.shape[0] + block.tau + iw.size
    return sos, n_def, block.nx


def _repair_fn(B, followers, n_total):
    """Complete a reduced point by solving each follower at its shift.

    ``followers`` lists (block, tag, phi-name) triples.  The leader sees a
    follower only through theta_tilde, which the shift fixes, so the completed
    point keeps every leader variable.
    """
    parts = []
    for block, tag, phi_name in followers:
        parts.append((block, B.blocks[phi_name], B.blocks["ll" + tag], B.blocks["mu_eq" + tag],
                      B.blocks["mu_cap" + tag], B.blocks["mu_w" + tag], block.iw.reshape(-1)))

    def repair(xr):
        x = np.zeros(n_total)
        x[:xr.shape[0]] = xr
        for block, phi, xl, y, zc, zw, iw in parts:
            sol = solve_qp(block_qp(block, xr[phi]))
            if sol.status != OPTIMAL:
                return None
            x[xl] = sol.x
            x[y] = sol.y_eq
            x[zc] = sol.z_in
            x[zw] = sol.z_lb[iw]
        return x

    return repair


def _min_l1_phi(B_factory, phi_fixed_solution):
    """Secondary pass: smallest |phi|_1 with the leader's physical decisions held fixed."""
    B, phi = B_factory()
    s = B.add_vars("s", phi.size, lb=0.0, cost=1.0)
    I = np.eye(phi.size)
    B.add_in([(I, phi), (-I, s)], np.zeros(phi.size))
    B.add_in([(-I, phi), (-I, s)], np.zeros(phi.size))
    sol = solve_qp(B.build(), check=False)
    if sol.status != OPTIMAL or np.sum(np.abs(sol.x[phi])) > np.sum(np.abs(phi_fixed_solution)) + 1e-9:
        return phi_fixed_solution
    return sol.x[phi]


# ---------------------------------------------------------------------------
# unit commitment with fixed data-center loading
# ---------------------------------------------------------------------------
@dataclass
class UcResult:
    u: np.ndarray
    p: np.ndarray
    ell: np.ndarray
    cup: np.ndarray
    cost: float
    report: BnbReport
    lmp: np.ndarray = None


def _hourly(a, tau, b, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None]
    if a.shape != (tau, b):
        raise ModelError(f"{name}: expected shape ({tau}, {b}), got {a.shape}")
    return a


def dc_injection(netdc, theta):
    """Bus-level data-center demand Gamma theta_t, shape (tau, n_buses)."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    return theta @ netdc.conversion.T


def _u0(grid, u0):
    return np.ones(grid.n_buses) if u0 is None else np.asarray(u0, dtype=float).reshape(grid.n_buses)


def solve_uc(grid, loads, renewables, theta=None, netdc=None, u0=None, p0=None, relax=False,
             gap_tol=1e-6, node_limit=10**6, trace=None):
    """Commitment and dispatch for a fixed data-center loading ``theta`` (tau x n)."""
    loads = np.atleast_2d(np.asarray(loads, dtype=float))
    tau, b = loads.shape
    if b != grid.n_buses:
        raise ModelError("loads must have one column per bus")
    renewables = _hourly(renewables, tau, b, "renewables")
    if theta is None:
        dc = np.zeros((tau, b))
    else:
        if netdc is None:
            raise ModelError("solve_uc: theta requires the data-center model for its conversion matrix")
        dc = _hourly(dc_injection(netdc, theta), tau, b, "theta")
    B = QpBuilder()
    rows = _uc_vars_rows(B, grid, loads, renewables, _u0(grid, u0), p0, lambda t: ([], -dc[t]))
    qp = B.build()
    u = B.blocks["u"]
    bins = np.zeros(0, dtype=int) if relax else u.reshape(-1)[qp.ub[u.reshape(-1)] > 0]
    x, rep = branch_and_bound(MixedIntegerKktProblem(qp, bins), gap_tol=gap_tol, node_limit=node_limit,
                              trace=trace)
    if x is None:
        raise ModelError("unit commitment infeasible even with full shedding")
    lmp = _uc_prices(grid, qp, B, rows, x, bins)
    return UcResult(x[u], x[B.blocks["p"]], x[B.blocks["ell"]], x[B.blocks["cup"]], qp.objective(x), rep, lmp)


def _uc_prices(grid, qp, B, rows, x, bins):
    """Bus prices from the dispatch QP with commitment fixed at its optimum."""
    lb, ub = qp.lb.copy(), qp.ub.copy()
    lb[bins] = np.round(x[bins])
    ub[bins] = np.round(x[bins])
    sol = solve_qp(qp.with_bounds(lb, ub))
    if sol.status != OPTIMAL:
        return None
    F = grid.ptdf
    out = []
    for t, bal in enumerate(rows["bal"]):
        zu = sol.z_in[rows["up"][t]]
        zd = sol.z_in[rows["dn"][t]]
        out.append(-sol.y_eq[bal] - F.T @ (zu - zd))
    return np.array(out)


# ---------------------------------------------------------------------------
# day-ahead bilevel
# ---------------------------------------------------------------------------
@dataclass
class DayAheadResult:
    u: np.ndarray
    p: np.ndarray
    ell: np.ndarray
    cup: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    allocation: AllocationResult
    cost: float
    report: BnbReport
    W_dot: np.ndarray = field(default=None, repr=False)


def _da_builder(grid, netdc, topology, scen, u0, p0, block, with_kkt, fixed=None):
    loads, ren = scen.loads, scen.renewables
    tau, b = loads.shape
    B = QpBuilder()
    # variable order: UC block (4 tau b), phi, follower primals; the UC rows reference
    # theta_tilde before the follower block exists, so its indices are computed ahead
    ith = 4 * tau * b + topology.k + block.ith

    def dc_term(t):
        return [(-netdc.conversion, ith[t])], np.zeros(b)

    rows = _uc_vars_rows(B, grid, loads, ren, _u0(grid, u0), p0, dc_term)
    phi = B.add_vars("phi", topology.k)
    xl, cap = _add_follower(B, block, phi)
    if fixed is not None:
        B.fix({nm: val for nm, val in fixed.items()})
    extra = None
    if with_kkt:
        extra = _add_follower_kkt(B, block, xl, cap)
    return B, rows, phi, extra


def _follower_inputs(netdc, scen, W_dot):
    delta = scen.compute_demand
    if W_dot is None:
        W_dot = latency_optimal_allocation(netdc, delta).W
    W_dot = np.asarray(W_dot, dtype=float)
    if W_dot.ndim == 2:
        W_dot = W_dot[None]
    return W_dot, delta


@dataclass
class BilevelModel:
    """A bilevel instance in single-level KKT form plus what is needed to read it back."""

    problem: MixedIntegerKktProblem
    builder: QpBuilder
    block: object
    delta: np.ndarray
    W_dot: np.ndarray
    topology: object


def build_day_ahead(grid, netdc, topology, scenario, u0=None, p0=None, relax_commitment=False, W_dot=None):
    tau = scenario.horizon
    if topology.horizon != tau or topology.n_dc != netdc.n_dc:
        raise ModelError("topology does not match the scenario horizon / data-center count")
    if scenario.loads.shape[1] != grid.n_buses or netdc.n_buses != grid.n_buses:
        raise ModelError("scenario / data-center conversion do not match the grid")
    W_dot, delta = _follower_inputs(netdc, scenario, W_dot)
    block = lower_block(netdc, topology, W_dot, delta)
    B, _, _, (sos, n_def, n_def_eq) = _da_builder(grid, netdc, topology, scenario, u0, p0, block, True)
    qp = B.build()
    u = B.blocks["u"].reshape(-1)
    bins = np.zeros(0, dtype=int) if relax_commitment else u[qp.ub[u] > 0]
    prob = MixedIntegerKktProblem(qp, bins, sos, n_def, n_def_eq, _repair_fn(B, [(block, "", "phi")], qp.n))
    return BilevelModel(prob, B, block, delta, W_dot, topology)


def solve_day_ahead(grid, netdc, topology, scenario, u0=None, p0=None, relax_commitment=False, gap_tol=1e-6,
                    node_limit=10**6, trace=None, W_dot=None, tiebreak=True):
    """Leader: commitment/dispatch/shifts; follower: latency-aware task re-allocation."""
    model = build_day_ahead(grid, netdc, topology, scenario, u0, p0, relax_commitment, W_dot)
    B, block, qp = model.builder, model.block, model.problem.qp
    x, rep = branch_and_bound(model.problem, gap_tol=gap_tol, node_limit=node_limit, trace=trace)
    if x is None:
        raise ModelError("day-ahead problem infeasible")
    phi_v = x[B.blocks["phi"]].copy()
    sol = {nm: x[B.blocks[nm]].copy() for nm in ("p", "ell", "cup", "u")}
    if tiebreak and topology.k:
        def factory():
            Bt, _, ph, _ = _da_builder(grid, netdc, topology, scenario, u0, p0, block, False, sol)
            Bt.clear_objective()
            return Bt, ph
        phi_v = _min_l1_phi(factory, phi_v)
    res = solve_qp(block_qp(block, phi_v))
    alloc = block_result(block, res.x, res.y_eq, res.z_in, res.z_lb, netdc, topology, model.delta, res.objective)
    return DayAheadResult(sol["u"], sol["p"], sol["ell"], sol["cup"], phi_v, alloc.theta, block.theta_dot,
                          alloc, qp.objective(x), rep, model.W_dot)


# ---------------------------------------------------------------------------
# single-period real-time problems
# ---------------------------------------------------------------------------
def _rt_data(grid, scenario, p_dot, u_dot, r_bar):
    d = scenario.loads[0]
    w = scenario.renewables[0]
    p_dot = scenario.day_ahead_dispatch if p_dot is None else p_dot
    if p_dot is None:
        raise ModelError("real-time problems need a day-ahead dispatch")
    p_dot = np.asarray(p_dot, dtype=float).reshape(grid.n_buses)
    u_dot = scenario.commitment if u_dot is None else u_dot
    u_dot = np.ones(grid.n_buses) if u_dot is None else np.asarray(u_dot, dtype=float).reshape(grid.n_buses)
    r_bar = grid.redispatch_limit if r_bar is None else np.broadcast_to(np.asarray(r_bar, dtype=float),
                                                                          (grid.n_buses,))
    lo = np.maximum(-r_bar, grid.gen_min * u_dot - p_dot)
    hi = np.minimum(r_bar, grid.gen_max * u_dot - p_dot)
    if np.any(lo > hi + 1e-9):
        raise ModelError("day-ahead dispatch lies outside the committed output range")
    hi = np.maximum(hi, lo)
    return d, w, p_dot, lo, hi


def _add_rt(B, grid, d, p_dot, lo, hi, objective="cost", tag="", weight=1.0):
    """Re-dispatch r and shedding variables with the (weighted) real-time cost."""
    b = grid.n_buses
    r = B.add_vars("r" + tag, b, lb=lo, ub=hi)
    ell = B.add_vars("ell" + tag, b, lb=0.0, ub=d)
    if objective == "cost":
        C = grid.gen_cost_quad
        B.add_quad(r, r, 2.0 * weight * C)
        B.add_linear(r, weight * (grid.gen_cost_lin + 2.0 * C @ p_dot))
        B.add_linear(ell, weight * grid.shed_cost)
        B.constant += weight * float(p_dot @ C @ p_dot + grid.gen_cost_lin @ p_dot)
    elif objective == "shed":
        B.add_linear(ell, np.ones(b))
    return r, ell


def _rt_builder(grid, d, p_dot, lo, hi, objective="cost"):
    B = QpBuilder()
    r, ell = _add_rt(B, grid, d, p_dot, lo, hi, objective)
    return B, r, ell


@dataclass
class DispatchResult:
    cost: float
    r: np.ndarray
    ell: np.ndarray
    lmp: np.ndarray
    flows: np.ndarray
    status: str = OPTIMAL


def dispatch_rt(grid, netdc, scenario, theta, p_dot=None, r_bar=None, u_dot=None):
    """Real-time re-dispatch around ``p_dot`` for a fixed data-center loading ``theta`` (length n)."""
    d, w, p_dot, lo, hi = _rt_data(grid, scenario, p_dot, u_dot, r_bar)
    dc = dc_injection(netdc, np.asarray(theta, dtype=float).reshape(1, -1))[0]
    B, r, ell = _rt_builder(grid, d, p_dot, lo, hi)
    bal, up, dn = _network_rows(B, grid, [(np.eye(grid.n_buses), r), (np.eye(grid.n_buses), ell)],
                                p_dot + w - d - dc)
    qp = B.build()
    sol = solve_qp(qp)
    if sol.status != OPTIMAL:
        return DispatchResult(np.inf, np.zeros(grid.n_buses), np.zeros(grid.n_buses), None, None, sol.status)
    F = grid.ptdf
    lmp = -sol.y_eq[bal] - F.T @ (sol.z_in[up] - sol.z_in[dn])
    inj = p_dot + sol.x[r] + sol.x[ell] + w - d - dc
    return DispatchResult(sol.objective, sol.x[r], sol.x[ell], lmp, F @ inj)


def min_shedding(grid, netdc, scenario, theta, p_dot=None, r_bar=None, u_dot=None):
    """Least total shedding achievable with |r| <= r_bar (LP screen)."""
    d, w, p_dot, lo, hi = _rt_data(grid, scenario, p_dot, u_dot, r_bar)
    dc = dc_injection(netdc, np.asarray(theta, dtype=float).reshape(1, -1))[0]
    B, r, ell = _rt_builder(grid, d, p_dot, lo, hi, objective="shed")
    _network_rows(B, grid, [(np.eye(grid.n_buses), r), (np.eye(grid.n_buses), ell)], p_dot + w - d - dc)
    sol = solve_qp(B.build(), check=False)
    return sol.objective if sol.status == OPTIMAL else np.inf


@dataclass
class IdealResult:
    r: np.ndarray
    ell: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    cost: float
    report: BnbReport
    allocation: AllocationResult = None


def _ideal_builder(grid, netdc, topology, d, w, p_dot, lo, hi, block, with_kkt, fixed=None, objective="cost"):
    b = grid.n_buses
    I = np.eye(b)
    B, r, ell = _rt_builder(grid, d, p_dot, lo, hi, objective)
    phi = B.add_vars("phi", topology.k)
    xl, cap = _add_follower(B, block, phi)
    _network_rows(B, grid, [(I, r), (I, ell), (-netdc.conversion, xl[block.ith[0]])], p_dot + w - d)
    if fixed is not None:
        B.fix(fixed)
    extra = _add_follower_kkt(B, block, xl, cap) if with_kkt else None
    return B, phi, extra


def build_single_period_ideal(grid, netdc, scenario, p_dot=None, r_bar=None, u_dot=None, W_dot=None):
    if scenario.horizon != 1:
        scenario = scenario.hour(0)
    topology = build_incidence(netdc.n_dc, 1)
    d, w, p_dot, lo, hi = _rt_data(grid, scenario, p_dot, u_dot, r_bar)
    W_dot, delta = _follower_inputs(netdc, scenario, W_dot)
    block = lower_block(netdc, topology, W_dot, delta)
    B, _, (sos, n_def, n_def_eq) = _ideal_builder(grid, netdc, topology, d, w, p_dot, lo, hi, block, True)
    qp = B.build()
    prob = MixedIntegerKktProblem(qp, (), sos, n_def, n_def_eq, _repair_fn(B, [(block, "", "phi")], qp.n))
    model = BilevelModel(prob, B, block, delta, W_dot, topology)
    return model, (d, w, p_dot, lo, hi)


def solve_single_period_ideal(grid, netdc, scenario, p_dot=None, r_bar=None, u_dot=None, W_dot=None,
                              gap_tol=1e-6, node_limit=10**6, trace=None, tiebreak=True):
    """Per-scenario cost-optimal shift with the follower's optimal response embedded."""
    model, (d, w, p_dot, lo, hi) = build_single_period_ideal(grid, netdc, scenario, p_dot, r_bar, u_dot, W_dot)
    B, block, topology, qp = model.builder, model.block, model.topology, model.problem.qp
    x, rep = branch_and_bound(model.problem, gap_tol=gap_tol, node_limit=node_limit, trace=trace)
    if x is None:
        raise ModelError("single-period ideal problem infeasible")
    r, ell = x[B.blocks["r"]].copy(), x[B.blocks["ell"]].copy()
    phi_v = x[B.blocks["phi"]].copy()
    if tiebreak and topology.k:
        def factory():
            Bt, ph, _ = _ideal_builder(grid, netdc, topology, d, w, p_dot, lo, hi, block, False,
                                       {"r": r, "ell": ell}, objective="none")
            return Bt, ph
        phi_v = _min_l1_phi(factory, phi_v)
    res = solve_qp(block_qp(block, phi_v))
    alloc = block_result(block, res.x, res.y_eq, res.z_in, res.z_lb, netdc, topology, model.delta, res.objective)
    return IdealResult(r, ell, phi_v, alloc.theta[0], qp.objective(x), rep, alloc)
