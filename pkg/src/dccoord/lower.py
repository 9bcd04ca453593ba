"""Data-center operator problems: latency-optimal allocation and shift re-allocation.

Variable layout of the re-allocation problem (``LowerBlock``), hour-major:

    W_t   (n*m, row-major: data center i, user j)   for t = 1..tau
    dt_t  (m)   re-scheduled demand, multi-period mode only
    th_t  (n)   new data-center loading

Equality rows, in order: user conservation (tau*m), data-center conservation
(tau*n), shift relation th - A phi = theta_dot (tau*n), temporal task
conservation (m, multi-period only).  One inequality row per hour caps the
latency increase.  Duals follow the sign convention of the follower
Lagrangian with ``-mu'(.)`` terms, so every equality dual is the negative
of the corresponding :mod:`dccoord.qp` multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .model import ModelError, latency
from .qp import OPTIMAL, QuadraticProgram, solve_qp


class InfeasibleShift(RuntimeError):
    """The requested shift violates the latency cap or task conservation."""


@dataclass
class AllocationResult:
    W: np.ndarray              # (tau, n, m)
    theta: np.ndarray          # (tau, n)
    delta_tilde: np.ndarray    # (tau, m)
    latency: np.ndarray        # (tau,)
    duals: dict = field(default_factory=dict)
    objective: float = 0.0
    status: str = OPTIMAL
    # inputs kept for residual checks
    delta: np.ndarray = None
    theta_dot: np.ndarray = None
    incidence: np.ndarray = None
    single_period: bool = True


# ---------------------------------------------------------------------------
# latency-optimal allocation
# ---------------------------------------------------------------------------
def _allocation_qp(netdc, delta_t):
    n, m = netdc.n_dc, netdc.n_users
    g = netdc.distance.reshape(-1)
    H = sp.identity(n * m, format="csr") * netdc.alloc_reg
    rows, cols = [], []
    for i in range(n):
        for j in range(m):
            rows.append(j)
            cols.append(i * m + j)
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, n * m))
    return QuadraticProgram(H, g, A, delta_t, lb=np.zeros(n * m))


def latency_optimal_allocation(netdc, delta):
    """Per-hour allocation minimising latency plus a small ridge term.

    ``delta`` has shape (m,) or (tau, m).
    """
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    if delta.shape[1] != netdc.n_users:
        raise ModelError("delta must have one entry per user")
    if np.any(delta < 0):
        raise ModelError("delta must be >= 0")
    tau = delta.shape[0]
    n, m = netdc.n_dc, netdc.n_users
    W = np.zeros((tau, n, m))
    mu_delta = np.zeros((tau, m))
    mu_w = np.zeros((tau, n, m))
    obj = 0.0
    for t in range(tau):
        sol = solve_qp(_allocation_qp(netdc, delta[t]))
        if sol.status != OPTIMAL:
            raise RuntimeError(f"allocation QP failed at hour {t}: {sol.status}")
        W[t] = np.maximum(sol.x, 0.0).reshape(n, m)
        mu_delta[t] = -sol.y_eq
        mu_w[t] = sol.z_lb.reshape(n, m)
        obj += sol.objective
    theta = W.sum(axis=2)
    lat = np.array([latency(W[t], netdc.distance) for t in range(tau)])
    return AllocationResult(W, theta, delta.copy(), lat, {"mu_delta": mu_delta, "mu_w": mu_w}, obj,
                            delta=delta.copy())


# ---------------------------------------------------------------------------
# re-allocation block shared with the bilevel reformulation
# ---------------------------------------------------------------------------
@dataclass
class LowerBlock:
    n: int
    m: int
    tau: int
    single_period: bool
    nx: int
    iw: np.ndarray        # (tau, n, m) variable indices
    idt: np.ndarray       # (tau, m) or empty
    ith: np.ndarray       # (tau, n)
    Q: sp.csr_matrix
    q: np.ndarray
    const: float
    E: sp.csr_matrix      # equality rows over block variables
    Ephi: sp.csr_matrix   # equality rows over phi
    e: np.ndarray
    rows: dict            # name -> row index array
    Cin: sp.csr_matrix    # cap rows (tau x nx)
    cin: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    theta_dot: np.ndarray
    latency_dot: np.ndarray


def lower_block(netdc, topology, W_dot, delta, cap_tol=0.0):
    """Constraint/objective data of the re-allocation problem with phi left symbolic."""
    W_dot = np.asarray(W_dot, dtype=float)
    if W_dot.ndim == 2:
        W_dot = W_dot[None]
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    tau, n, m = W_dot.shape
    if n != netdc.n_dc or m != netdc.n_users or delta.shape != (tau, m):
        raise ModelError("reallocate: W_dot / delta shapes do not match the data-center model")
    if topology.incidence.shape[0] != n * tau:
        raise ModelError("reallocate: topology does not match (n, tau)")
    single = tau == 1
    g = netdc.distance.reshape(-1)
    nm = n * m
    iw = np.arange(tau * nm).reshape(tau, n, m)
    pos = tau * nm
    if single:
        idt = np.zeros((0, m), dtype=int)
    else:
        idt = (pos + np.arange(tau * m)).reshape(tau, m)
        pos += tau * m
    ith = (pos + np.arange(tau * n)).reshape(tau, n)
    nx = pos + tau * n

    lat_dot = np.array([float(g @ W_dot[t].reshape(-1)) for t in range(tau)])
    theta_dot = W_dot.sum(axis=2)

    # objective: sum_t 1/2 (g'w_t - L_dot_t)^2 + rho/2 |dt_t - delta_t|^2
    Qr, Qc, Qv = [], [], []
    q = np.zeros(nx)
    const = 0.0
    gg = np.outer(g, g)
    nzr, nzc = np.nonzero(gg)
    for t in range(tau):
        base = t * nm
        Qr.append(base + nzr)
        Qc.append(base + nzc)
        Qv.append(gg[nzr, nzc])
        q[iw[t].reshape(-1)] = -lat_dot[t] * g
        const += 0.5 * lat_dot[t] ** 2
        if not single:
            rho = netdc.shift_reg
            Qr.append(idt[t])
            Qc.append(idt[t])
            Qv.append(np.full(m, rho))
            q[idt[t]] = -rho * delta[t]
            const += 0.5 * rho * float(delta[t] @ delta[t])
    Q = sp.csr_matrix((np.concatenate(Qv), (np.concatenate(Qr), np.concatenate(Qc))), shape=(nx, nx))

    er, ec, ev = [], [], []
    e = []
    rows = {}
    r = 0
    # user conservation: sum_i w_tij - dt_tj = 0   (or = delta_tj)
    rows["delta"] = np.arange(r, r + tau * m).reshape(tau, m)
    for t in range(tau):
        for j in range(m):
            for i in range(n):
                er.append(r)
                ec.append(iw[t, i, j])
                ev.append(1.0)
            if single:
                e.append(delta[t, j])
            else:
                er.append(r)
                ec.append(idt[t, j])
                ev.append(-1.0)
                e.append(0.0)
            r += 1
    # data-center conservation: sum_j w_tij - th_ti = 0
    rows["theta"] = np.arange(r, r + tau * n).reshape(tau, n)
    for t in range(tau):
        for i in range(n):
            for j in range(m):
                er.append(r)
                ec.append(iw[t, i, j])
                ev.append(1.0)
            er.append(r)
            ec.append(ith[t, i])
            ev.append(-1.0)
            e.append(0.0)
            r += 1
    # shift relation written as  A phi - th = -theta_dot
    rows["phi"] = np.arange(r, r + tau * n)
    phi_first = r
    for t in range(tau):
        for i in range(n):
            er.append(r)
            ec.append(ith[t, i])
            ev.append(-1.0)
            e.append(-theta_dot[t, i])
            r += 1
    if not single:
        rows["tau"] = np.arange(r, r + m)
        for j in range(m):
            for t in range(tau):
                er.append(r)
                ec.append(idt[t, j])
                ev.append(1.0)
            e.append(float(delta[:, j].sum()))
            r += 1
    E = sp.csr_matrix((ev, (er, ec)), shape=(r, nx))
    A = sp.csr_matrix(topology.incidence)
    Ephi = sp.vstack([sp.csr_matrix((phi_first, A.shape[1])), A,
                      sp.csr_matrix((r - phi_first - A.shape[0], A.shape[1]))], format="csr")

    # latency cap: g'w_t <= (1 + alpha) L_dot_t
    alpha = netdc.latency_loss_cap
    cr, cc, cv = [], [], []
    for t in range(tau):
        idx = iw[t].reshape(-1)
        nz = np.flatnonzero(g)
        cr.extend([t] * nz.size)
        cc.extend(idx[nz])
        cv.extend(g[nz])
    Cin = sp.csr_matrix((cv, (cr, cc)), shape=(tau, nx))
    cin = (1.0 + alpha) * lat_dot + cap_tol * np.maximum(1.0, lat_dot)

    lb = np.full(nx, -np.inf)
    ub = np.full(nx, np.inf)
    lb[iw.reshape(-1)] = 0.0
    return LowerBlock(n, m, tau, single, nx, iw, idt, ith, Q, q, const, E, Ephi, np.array(e), rows,
                      Cin, cin, lb, ub, theta_dot, lat_dot)


def block_qp(block, phi):
    """Re-allocation QP for a fixed shift vector."""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    b = block.e - block.Ephi @ phi
    return QuadraticProgram(block.Q, block.q, block.E, b, block.Cin, block.cin, block.lb, block.ub, block.const)


def block_result(block, x, y_eq, z_cap, z_lb, netdc, topology, delta, objective):
    """Unpack a block solution (primal + qp-convention multipliers) into an AllocationResult."""
    tau, n, m = block.tau, block.n, block.m
    W = x[block.iw]
    theta = x[block.ith]
    dt = np.asarray(delta, dtype=float).reshape(tau, m).copy() if block.single_period else x[block.idt]
    rows = block.rows
    duals = {
        "mu_delta": -y_eq[rows["delta"]],
        "mu_theta": -y_eq[rows["theta"]],
        "mu_phi": -y_eq[rows["phi"]],
        "mu_tau": -y_eq[rows["tau"]] if "tau" in rows else np.zeros(m),
        "mu_alpha": np.asarray(z_cap, dtype=float).copy(),
        "mu_w": z_lb[block.iw],
    }
    lat = np.array([latency(W[t], netdc.distance) for t in range(tau)])
    return AllocationResult(W, theta, dt, lat, duals, objective, OPTIMAL,
                            delta=np.asarray(delta, dtype=float).reshape(tau, m).copy(),
                            theta_dot=block.theta_dot.copy(), incidence=topology.incidence,
                            single_period=block.single_period)


def reallocate(netdc, topology, phi, W_dot, delta, cap_tol=0.0):
    """Optimal response of the data-center operator to the shift request ``phi``.

    Raises :class:`InfeasibleShift` when no allocation satisfies the latency
    cap (relaxed by ``cap_tol`` times max(1, L_dot)) and conservation.
    """
    block = lower_block(netdc, topology, W_dot, delta, cap_tol)
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if phi.shape[0] != topology.k:
        raise ModelError(f"phi must have length {topology.k}")
    sol = solve_qp(block_qp(block, phi))
    if sol.status != OPTIMAL:
        raise InfeasibleShift(f"shift request rejected by the data-center operator ({sol.status})")
    return block_result(block, sol.x, sol.y_eq, sol.z_in, sol.z_lb, netdc, topology, delta, sol.objective)


def kkt_residual(allocation, phi, W_dot, netdc):
    """Max-norm of the follower's KKT system at ``allocation``.

    Covers stationarity in theta, re-scheduled demand and w, dual feasibility,
    complementarity products and primal feasibility.
    """
    res = allocation
    W_dot = np.asarray(W_dot, dtype=float)
    if W_dot.ndim == 2:
        W_dot = W_dot[None]
    tau, n, m = res.W.shape
    G = netdc.distance
    d = res.duals
    phi = np.asarray(phi, dtype=float).reshape(-1)
    out = 0.0
    mu_phi = d["mu_phi"].reshape(tau, n)
    out = max(out, float(np.max(np.abs(d["mu_theta"] + mu_phi))))
    if not res.single_period:
        stat_dt = netdc.shift_reg * (res.delta_tilde - res.delta) + d["mu_delta"] - d["mu_tau"][None, :]
        out = max(out, float(np.max(np.abs(stat_dt))))
    for t in range(tau):
        dl = latency(res.W[t] - W_dot[t], G)
        stat_w = G * dl - d["mu_delta"][t][None, :] - d["mu_theta"][t][:, None] - d["mu_w"][t] + d["mu_alpha"][t] * G
        out = max(out, float(np.max(np.abs(stat_w))))
        slack = netdc.latency_loss_cap * latency(W_dot[t], G) - dl
        out = max(out, abs(d["mu_alpha"][t] * slack), max(0.0, -slack))
    out = max(out, float(np.max(-d["mu_w"], initial=0.0)), float(np.max(-d["mu_alpha"], initial=0.0)))
    out = max(out, float(np.max(np.abs(d["mu_w"] * res.W))))
    out = max(out, float(np.max(-res.W, initial=0.0)))
    out = max(out, conservation_residual(res, phi))
    return out


def conservation_residual(allocation, phi):
    """Max-norm of W'1 - dt, W1 - th, A phi - (th - th_dot) and sum_t (dt - delta)."""
    res = allocation
    tau, n, m = res.W.shape
    out = float(np.max(np.abs(res.W.sum(axis=1) - res.delta_tilde)))
    out = max(out, float(np.max(np.abs(res.W.sum(axis=2) - res.theta))))
    if res.incidence is not None:
        shift = res.incidence @ np.asarray(phi, dtype=float).reshape(-1)
        out = max(out, float(np.max(np.abs(shift - (res.theta - res.theta_dot).reshape(-1)), initial=0.0)))
    out = max(out, float(np.max(np.abs((res.delta_tilde - res.delta).sum(axis=0)))))
    return out
