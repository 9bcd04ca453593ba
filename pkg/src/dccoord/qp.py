"""Dense/sparse convex QP solver (primal active set) with dual extraction.

Problem form::

    minimise    1/2 x'Hx + c'x + constant
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                lb <= x <= ub

Lagrangian sign convention: at an optimum

    Hx + c + A_eq' y + A_in' z_in - z_lb + z_ub = 0,   z_in, z_lb, z_ub >= 0.

The method is a primal active-set iteration started from a phase-1 LP over
artificial variables.  Step directions come from the equality-constrained
subproblem on the working set, solved with a tiny proximal shift and two
rounds of iterative refinement, so positive semidefinite (including zero)
Hessians are handled without a separate LP code path.  Ties in pivoting are
broken by lowest index, which makes every solve reproducible bit for bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"

# reduced problems at or above this size use sparse factorisations
SPARSE_THRESHOLD = 220
# below this size every working-set change refactors the KKT matrix directly
DIRECT_THRESHOLD = 120


class QpError(ValueError):
    """Malformed QP data (shapes, non-PSD Hessian, NaN)."""


def _as_csr(M, shape):
    if M is None:
        return sp.csr_matrix(shape)
    if sp.issparse(M):
        M = sp.csr_matrix(M, dtype=float)
    else:
        M = sp.csr_matrix(np.atleast_2d(np.asarray(M, dtype=float)).reshape(shape))
    if M.shape != shape:
        raise QpError(f"matrix shape {M.shape} does not match expected {shape}")
    M.sum_duplicates()
    M.eliminate_zeros()
    return M


def _as_vec(v, n, fill=0.0):
    if v is None:
        return np.full(n, fill, dtype=float)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != n:
        raise QpError(f"vector length {v.shape[0]} does not match expected {n}")
    return v.copy()


@dataclass(frozen=True, eq=False)
class QuadraticProgram:
    """Convex QP data.  Matrices are stored as CSR; vectors as float arrays."""

    H: sp.csr_matrix
    c: np.ndarray
    A_eq: sp.csr_matrix = None
    b_eq: np.ndarray = None
    A_in: sp.csr_matrix = None
    b_in: np.ndarray = None
    lb: np.ndarray = None
    ub: np.ndarray = None
    constant: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        n = c.shape[0]
        H = _as_csr(self.H, (n, n)) if self.H is not None else sp.csr_matrix((n, n))
        m_eq = 0 if self.b_eq is None else np.asarray(self.b_eq).reshape(-1).shape[0]
        m_in = 0 if self.b_in is None else np.asarray(self.b_in).reshape(-1).shape[0]
        object.__setattr__(self, "c", c.copy())
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "A_eq", _as_csr(self.A_eq, (m_eq, n)))
        object.__setattr__(self, "b_eq", _as_vec(self.b_eq, m_eq))
        object.__setattr__(self, "A_in", _as_csr(self.A_in, (m_in, n)))
        object.__setattr__(self, "b_in", _as_vec(self.b_in, m_in))
        object.__setattr__(self, "lb", _as_vec(self.lb, n, -np.inf))
        object.__setattr__(self, "ub", _as_vec(self.ub, n, np.inf))
        object.__setattr__(self, "constant", float(self.constant))
        for name in ("c", "b_eq", "b_in"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise QpError(f"{name} contains non-finite entries")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise QpError("bounds contain NaN")

    @property
    def n(self):
        return self.c.shape[0]

    @property
    def m_eq(self):
        return self.b_eq.shape[0]

    @property
    def m_in(self):
        return self.b_in.shape[0]

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.H @ x) + self.c @ x + self.constant)

    def max_violation(self, x):
        """Largest absolute constraint violation at ``x``."""
        x = np.asarray(x, dtype=float)
        v = 0.0
        if self.m_eq:
            v = max(v, float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        if self.m_in:
            v = max(v, float(np.max(self.A_in @ x - self.b_in, initial=0.0)))
        v = max(v, float(np.max(self.lb - x, initial=0.0)), float(np.max(x - self.ub, initial=0.0)))
        return v

    def with_bounds(self, lb, ub):
        return QuadraticProgram(self.H, self.c, self.A_eq, self.b_eq, self.A_in, self.b_in, lb, ub, self.constant)

    def scaled(self, factor):
        """Same feasible set, objective multiplied by ``factor``."""
        return QuadraticProgram(self.H * factor, self.c * factor, self.A_eq, self.b_eq, self.A_in,
                                self.b_in, self.lb, self.ub, self.constant * factor)


@dataclass
class QpSolution:
    x: np.ndarray
    y_eq: np.ndarray
    z_in: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    objective: float
    status: str
    kkt_residual: float
    iterations: int = 0
    active_in: np.ndarray = field(default=None, repr=False)
    bound_state: np.ndarray = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status == OPTIMAL

    def dual_objective(self, problem):
        """Wolfe dual objective at (x, y, z); equals the primal value at optimality."""
        x = self.x
        val = -0.5 * x @ (problem.H @ x) - problem.b_eq @ self.y_eq - problem.b_in @ self.z_in + problem.constant
        fin_l = np.isfinite(problem.lb)
        fin_u = np.isfinite(problem.ub)
        val += problem.lb[fin_l] @ self.z_lb[fin_l] - problem.ub[fin_u] @ self.z_ub[fin_u]
        return float(val)


def check_psd(H, max_shift=1e-10):
    """Raise :class:`QpError` unless ``H`` is symmetric PSD.

    Cholesky is attempted on ``H + shift*I`` for a few shifts up to
    ``max_shift * max(1, |H|_max)``.
    """
    if H.nnz == 0:
        return
    asym = abs(H - H.T)
    scale = max(1.0, float(abs(H).max()))
    if asym.nnz and float(asym.max()) > 1e-12 * scale:
        raise QpError("Hessian is not symmetric")
    nz = np.unique(H.nonzero()[0])
    Hd = H[nz][:, nz].toarray()
    for shift in (0.0, 1e-14, 1e-12, max_shift):
        try:
            np.linalg.cholesky(Hd + shift * scale * np.eye(nz.size))
            return
        except np.linalg.LinAlgError:
            continue
    raise QpError("Hessian is not positive semidefinite")


def kkt_residual(problem, x, y_eq, z_in, z_lb, z_ub):
    """Relative max-norm of stationarity, feasibility, sign and complementarity errors."""
    H, c = problem.H, problem.c
    Hx = H @ x
    stat = Hx + c + problem.A_eq.T @ y_eq + problem.A_in.T @ z_in - z_lb + z_ub
    gscale = 1.0 + max(float(np.max(np.abs(c), initial=0.0)), float(np.max(np.abs(Hx), initial=0.0)))
    res = float(np.max(np.abs(stat), initial=0.0)) / gscale
    if problem.m_eq:
        res = max(res, float(np.max(np.abs(problem.A_eq @ x - problem.b_eq))) / (1.0 + float(np.max(np.abs(problem.b_eq)))))
    slack_in = problem.b_in - problem.A_in @ x
    if problem.m_in:
        bscale = 1.0 + float(np.max(np.abs(problem.b_in)))
        res = max(res, float(np.max(-slack_in, initial=0.0)) / bscale)
        res = max(res, float(np.max(-z_in, initial=0.0)) / gscale)
        res = max(res, float(np.max(np.abs(z_in * slack_in))) / (gscale * bscale))
    fl, fu = np.isfinite(problem.lb), np.isfinite(problem.ub)
    xs = 1.0 + float(np.max(np.abs(x), initial=0.0))
    res = max(res, float(np.max((problem.lb - x)[fl], initial=0.0)) / xs,
              float(np.max((x - problem.ub)[fu], initial=0.0)) / xs)
    res = max(res, float(np.max(-z_lb, initial=0.0)) / gscale, float(np.max(-z_ub, initial=0.0)) / gscale)
    res = max(res, float(np.max(np.abs(z_lb[fl] * (x - problem.lb)[fl]), initial=0.0)) / (gscale * xs))
    res = max(res, float(np.max(np.abs(z_ub[fu] * (problem.ub - x)[fu]), initial=0.0)) / (gscale * xs))
    res = max(res, float(np.max(np.abs(z_lb[~fl]), initial=0.0)) / gscale,
              float(np.max(np.abs(z_ub[~fu]), initial=0.0)) / gscale)
    return res


# ---------------------------------------------------------------------------
# internal working-set machinery
# ---------------------------------------------------------------------------
class _Schur:
    """KKT solves for a changing working set.

    A base KKT matrix ``K0`` is factorised once for the free variables F0 and
    working rows R0.  Later working-set changes are appended as bordering
    rows/columns and handled through a small dense Schur complement; after
    ``REFACTOR`` changes the base is rebuilt.
    """

    REFACTOR = 40

    def __init__(self, core, F, R):
        self.core = core
        self.F = F.copy()
        self.R = R.copy()
        self.ok = self._refactor()

    def _refactor(self):
        core = self.core
        self.F0 = np.flatnonzero(self.F)
        self.R0 = np.flatnonzero(self.R)
        n0, m0 = self.F0.size, self.R0.size
        self.n0, self.m0 = n0, m0
        self.posF = np.full(core.n, -1)
        self.posF[self.F0] = np.arange(n0)
        self.posR = np.full(core.m, -1)
        self.posR[self.R0] = np.arange(m0)
        self.items = []  # (kind, index); kinds: 'var', 'row', 'fix', 'rem'
        self.B = []
        self.Y = []
        self.S_lu = None
        if core.sparse:
            HFF = core.Hc[self.F0][:, self.F0] + core.sigma * sp.identity(n0, format="csc")
            ARF = core.Ar[self.R0][:, self.F0]
            K = sp.bmat([[HFF, ARF.T], [ARF, None]], format="csc") if m0 else sp.csc_matrix(HFF)
            try:
                lu = spla.splu(K, permc_spec="COLAMD", diag_pivot_thresh=0.1)
            except RuntimeError:
                return False
            self._k0 = lu.solve
        else:
            K = np.zeros((n0 + m0, n0 + m0))
            K[:n0, :n0] = core.H[np.ix_(self.F0, self.F0)]
            K[np.arange(n0), np.arange(n0)] += core.sigma
            ARF = core.A[np.ix_(self.R0, self.F0)]
            K[n0:, :n0] = ARF
            K[:n0, n0:] = ARF.T
            if K.size == 0:
                self._k0 = lambda r: r.copy()
                return True
            with np.errstate(all="ignore"), warnings.catch_warnings():
                warnings.simplefilter("ignore")
                lu = sla.lu_factor(K, check_finite=False)
            d = np.abs(np.diag(lu[0]))
            if not np.all(np.isfinite(lu[0])) or d.min() <= 1e-14 * max(1.0, d.max()):
                return False
            self._k0 = lambda r: sla.lu_solve(lu, r, check_finite=False)
        return True

    # -- border bookkeeping ----------------------------------------------
    def _col(self, kind, idx):
        core = self.core
        b = np.zeros(self.n0 + self.m0)
        if kind == "var":
            b[: self.n0] = core.hcol(idx)[self.F0]
            if self.m0:
                b[self.n0:] = core.acol(idx)[self.R0]
        elif kind == "row":
            b[: self.n0] = core.arow(idx)[self.F0]
        elif kind == "fix":
            b[self.posF[idx]] = 1.0
        else:
            b[self.n0 + self.posR[idx]] = 1.0
        return b

    def _find(self, kind, idx):
        for k, it in enumerate(self.items):
            if it[0] == kind and it[1] == idx:
                return k
        return -1

    def _push(self, kind, idx):
        b = self._col(kind, idx)
        self.items.append((kind, idx))
        self.B.append(b)
        self.Y.append(self._k0(b))
        self.S_lu = None

    def _pop(self, k):
        del self.items[k]
        del self.B[k]
        del self.Y[k]
        self.S_lu = None

    def _change(self, kind, idx, inverse):
        k = self._find(inverse, idx)
        if k >= 0:
            self._pop(k)
        else:
            self._push(kind, idx)
        if len(self.items) > self.REFACTOR:
            self.ok = self._refactor()
        return self.ok

    def add_row(self, r):
        self.R[r] = True
        return self._change("row", r, "rem")

    def remove_row(self, r):
        self.R[r] = False
        return self._change("rem", r, "row")

    def fix_var(self, j):
        self.F[j] = False
        return self._change("fix", j, "var")

    def free_var(self, j):
        self.F[j] = True
        return self._change("var", j, "fix")

    def _schur(self):
        core = self.core
        k = len(self.items)
        D = np.zeros((k, k))
        for a, (ka, ia) in enumerate(self.items):
            if ka == "var":
                for b_, (kb, ib) in enumerate(self.items):
                    if kb == "var":
                        D[a, b_] = core.hentry(ia, ib)
                    elif kb == "row":
                        D[a, b_] = D[b_, a] = core.aentry(ib, ia)
                D[a, a] += core.sigma
        Bm = np.column_stack(self.B)
        Ym = np.column_stack(self.Y)
        S = D - Bm.T @ Ym
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lu = sla.lu_factor(S, check_finite=False)
        d = np.abs(np.diag(lu[0]))
        if not np.all(np.isfinite(lu[0])) or d.min() <= 1e-30 * max(1.0, d.max()):
            return None
        self.S_lu = lu
        self._Bm, self._Ym = Bm, Ym
        return lu

    # -- solve -------------------------------------------------------------
    def solve(self, rg, rr):
        """Solve the current KKT system; ``rg``/``rr`` are full-length rhs vectors."""
        core = self.core
        f = np.concatenate([rg[self.F0], rr[self.R0]])
        u = self._k0(f)
        p = np.zeros(core.n)
        nu = np.zeros(core.m)
        if self.items:
            if self.S_lu is None and self._schur() is None:
                return None
            h = np.array([rg[i] if kd == "var" else rr[i] if kd == "row" else 0.0 for kd, i in self.items])
            v = sla.lu_solve(self.S_lu, h - self._Bm.T @ u, check_finite=False)
            u = u - self._Ym @ v
            for (kd, i), val in zip(self.items, v):
                if kd == "var":
                    p[i] = val
                elif kd == "row":
                    nu[i] = val
        p[self.F0] = u[: self.n0]
        nu[self.R0] = u[self.n0:]
        p[~self.F] = 0.0
        nu[~self.R] = 0.0
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(nu))):
            return None
        return p, nu


class _DenseKKT:
    """Direct KKT solves for small dense problems: refactor after every change."""

    def __init__(self, core, F, R):
        self.core = core
        self.F = F.copy()
        self.R = R.copy()
        self.ok = self._refactor()

    def _refactor(self):
        core = self.core
        self.F0 = np.flatnonzero(self.F)
        self.R0 = np.flatnonzero(self.R)
        n0, m0 = self.F0.size, self.R0.size
        self.n0 = n0
        K = np.zeros((n0 + m0, n0 + m0))
        K[:n0, :n0] = core.H[np.ix_(self.F0, self.F0)]
        K[np.arange(n0), np.arange(n0)] += core.sigma
        ARF = core.A[np.ix_(self.R0, self.F0)]
        K[n0:, :n0] = ARF
        K[:n0, n0:] = ARF.T
        self.lu = None
        if K.size == 0:
            return True
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lu = sla.lu_factor(K, check_finite=False)
        d = np.abs(np.diag(lu[0]))
        if not np.all(np.isfinite(lu[0])) or d.min() <= 1e-14 * max(1.0, d.max()):
            return False
        self.lu = lu
        return True

    def add_row(self, r):
        self.R[r] = True
        self.ok = self._refactor()
        return self.ok

    def remove_row(self, r):
        self.R[r] = False
        self.ok = self._refactor()
        return self.ok

    def fix_var(self, j):
        self.F[j] = False
        self.ok = self._refactor()
        return self.ok

    def free_var(self, j):
        self.F[j] = True
        self.ok = self._refactor()
        return self.ok

    def solve(self, rg, rr):
        core = self.core
        p = np.zeros(core.n)
        nu = np.zeros(core.m)
        if self.lu is None:
            return p, nu
        u = sla.lu_solve(self.lu, np.concatenate([rg[self.F0], rr[self.R0]]), check_finite=False)
        if not np.all(np.isfinite(u)):
            return None
        p[self.F0] = u[: self.n0]
        nu[self.R0] = u[self.n0:]
        return p, nu


class _Core:
    """Reduced, row-scaled problem on which the active-set loop runs."""

    def __init__(self, H, c, A_eq, b_eq, A_in, b_in, lb, ub):
        self.n = c.shape[0]
        self.m_eq = b_eq.shape[0]
        self.m_in = b_in.shape[0]
        self.m = self.m_eq + self.m_in
        self.sparse = (self.n + self.m) >= SPARSE_THRESHOLD
        self.direct = (self.n + self.m) <= DIRECT_THRESHOLD
        if sp.issparse(A_eq) or sp.issparse(A_in) or sp.issparse(H):
            A = sp.vstack([sp.csr_matrix(A_eq), sp.csr_matrix(A_in)], format="csr") if self.m else sp.csr_matrix((0, self.n))
            H = sp.csr_matrix(H)
        else:
            A = np.vstack([A_eq, A_in]) if self.m else np.zeros((0, self.n))
            if self.sparse:
                A, H = sp.csr_matrix(A), sp.csr_matrix(H)
        if self.sparse:
            self.Hc = sp.csc_matrix(H)
            self.H = self.Hc
            self.Ar = sp.csr_matrix(A)
            self.Ac = sp.csc_matrix(A)
            self.A = self.Ar
            self.A_in = self.Ar[self.m_eq:]
            Hcoo, Acoo = H.tocoo(), A.tocoo()
            self._hd = {(int(i), int(j)): float(v) for i, j, v in zip(Hcoo.row, Hcoo.col, Hcoo.data)}
            self._ad = {(int(i), int(j)): float(v) for i, j, v in zip(Acoo.row, Acoo.col, Acoo.data)}
        else:
            self.H = H.toarray() if sp.issparse(H) else H
            self.A = A.toarray() if sp.issparse(A) else A
            self.A_in = self.A[self.m_eq:]
        self.c = c
        self.b = np.concatenate([b_eq, b_in])
        self.b_in = b_in
        self.lb = lb
        self.ub = ub
        hdata = H.data if sp.issparse(H) else H
        self.hscale = max(1.0, float(np.max(np.abs(hdata), initial=0.0)))
        self.sigma = 1e-10 * self.hscale
        self.gscale = max(1.0, float(np.max(np.abs(c), initial=0.0)))
        self._fin_lb = np.isfinite(lb)
        self._fin_ub = np.isfinite(ub)

    # -- matrix access -------------------------------------------------------
    def hcol(self, j):
        if self.sparse:
            return self.Hc[:, [j]].toarray().ravel()
        return self.H[:, j]

    def acol(self, j):
        if self.sparse:
            return self.Ac[:, [j]].toarray().ravel()
        return self.A[:, j]

    def arow(self, r):
        if self.sparse:
            return self.Ar[[r]].toarray().ravel()
        return self.A[r]

    def hentry(self, i, j):
        if self.sparse:
            return self._hd.get((i, j), 0.0)
        return float(self.H[i, j])

    def aentry(self, r, j):
        if self.sparse:
            return self._ad.get((r, j), 0.0)
        return float(self.A[r, j])

    def _direction(self, kkt, g, x):
        """Return (p, nu, noise) or None on a singular working set.

        The row right-hand side carries the current residual of the working
        constraints so that drift from rounding is removed as we go.
        """
        F, R = kkt.F, kkt.R
        rr = np.where(R, self.b - self.A @ x, 0.0) if self.m else np.zeros(0)
        out = kkt.solve(-g, rr)
        if out is None:
            return None
        p, nu = out
        for _ in range(2):
            r1 = -g - self.H @ p - (self.A.T @ nu if self.m else 0.0)
            r2 = rr - (self.A @ p) if self.m else rr
            r1[~F] = 0.0
            d = kkt.solve(r1, r2)
            if d is None:
                break
            p = p + d[0]
            nu = nu + d[1]
        nu[~R] = 0.0
        noise = float(np.max(np.abs(np.where(R, rr - self.A @ p, 0.0)), initial=0.0)) if self.m else 0.0
        return p, nu, noise

    def _ratio(self, x, p, in_work, F):
        m_in = self.m_in
        slack_in = self.b_in - self.A_in @ x if m_in else np.zeros(0)
        rate_in = self.A_in @ p if m_in else np.zeros(0)
        slack = np.concatenate([slack_in, x - self.lb, self.ub - x])
        rate = np.concatenate([rate_in, -p, p])
        fx = ~F
        blocked = np.concatenate([in_work, fx | ~self._fin_lb, fx | ~self._fin_ub])
        pmax = float(np.max(np.abs(p), initial=0.0))
        return kernels.ratio_test(slack, rate, blocked, 1e-9 * pmax)

    # -- main loop ---------------------------------------------------------
    def run(self, x, in_work, bstate, max_iter, stat_tol, drop_tol):
        n, m_eq, m_in = self.n, self.m_eq, self.m_in
        iters = 0
        zero_steps = 0
        R = np.concatenate([np.ones(m_eq, dtype=bool), in_work])
        kkt = (_DenseKKT if self.direct else _Schur)(self, bstate == 0, R)
        if not kkt.ok:
            return "singular", x, in_work, bstate, None, iters
        nu = np.zeros(self.m)
        while iters < max_iter:
            iters += 1
            g = self.H @ x + self.c
            out = self._direction(kkt, g, x)
            if out is None:
                return "singular", x, in_work, bstate, None, iters
            p, nu, noise = out
            F = bstate == 0
            Hp = self.H @ p
            pmax = float(np.max(np.abs(p), initial=0.0))
            # reduced gradient norm on the working set, from the refined step
            stat = float(np.max(np.abs(Hp[F] + self.sigma * p[F]), initial=0.0))
            slope = float(g @ p)
            xs = 1.0 + float(np.max(np.abs(x), initial=0.0))
            converged = stat <= stat_tol or slope >= 0.0 or noise > 1e-10 * pmax
            if converged:
                if 0.0 < pmax <= 1e-6 * xs:
                    # polish onto the working-set minimiser when that stays feasible
                    a_b, _ = self._ratio(x, p, in_work, F)
                    if a_b >= 1.0:
                        x = x + p
                        g = self.H @ x + self.c
                W = np.flatnonzero(in_work)
                w = g + (self.A.T @ nu if self.m else 0.0)
                fixed = np.flatnonzero(bstate != 0)
                bmult = np.where(bstate[fixed] < 0, w[fixed], -w[fixed])
                mult = np.concatenate([nu[m_eq + W], bmult])
                drop = kernels.select_drop(mult, drop_tol, zero_steps > 25)
                if drop < 0:
                    return "optimal", x, in_work, bstate, nu, iters
                if drop < W.size:
                    in_work[W[drop]] = False
                    ok = kkt.remove_row(m_eq + W[drop])
                else:
                    j = fixed[drop - W.size]
                    bstate[j] = 0
                    ok = kkt.free_var(j)
                if not ok:
                    return "singular", x, in_work, bstate, None, iters
                continue

            curv = float(p @ Hp)
            if curv > 1e-13 * self.hscale * float(p @ p):
                a_c = -slope / curv
            else:
                a_c = np.inf
            a_b, idx = self._ratio(x, p, in_work, F)
            if a_b == np.inf and a_c == np.inf:
                return "unbounded", x, in_work, bstate, None, iters
            if a_b <= a_c:
                x = x + a_b * p
                if idx < m_in:
                    in_work[idx] = True
                    ok = kkt.add_row(m_eq + idx)
                else:
                    j = idx - m_in if idx < m_in + n else idx - m_in - n
                    bstate[j] = -1 if idx < m_in + n else 1
                    x[j] = self.lb[j] if bstate[j] < 0 else self.ub[j]
                    ok = kkt.fix_var(j)
                if not ok:
                    return "singular", x, in_work, bstate, None, iters
                zero_steps = zero_steps + 1 if a_b == 0.0 else 0
            else:
                x = x + a_c * p
                zero_steps = 0
        return MAX_ITER, x, in_work, bstate, nu, iters


    # -- helpers -----------------------------------------------------------
    def independent(self, in_work, bstate):
        """Prune working rows/bounds so that [A_eq; A_W; E_B] has full row rank."""
        W = np.flatnonzero(in_work)
        B = np.flatnonzero(bstate != 0)
        if W.size + B.size == 0:
            return in_work, bstate
        A = self.A.toarray() if self.sparse else self.A
        rows = [A[self.m_eq + W]]
        eye = np.zeros((B.size, self.n))
        eye[np.arange(B.size), B] = 1.0
        rows.append(eye)
        C = np.vstack(rows)
        if self.m_eq:
            Q, _ = np.linalg.qr(A[: self.m_eq].T)
            C = C - (C @ Q) @ Q.T
        _, Rm, piv = sla.qr(C.T, mode="economic", pivoting=True)
        d = np.abs(np.diag(Rm)) if Rm.size else np.zeros(0)
        tol = 1e-9 * max(1.0, float(d[0]) if d.size else 1.0)
        keep = np.sort(piv[: int(np.sum(d > tol))])
        new_in = np.zeros_like(in_work)
        new_b = np.zeros_like(bstate)
        for k in keep:
            if k < W.size:
                new_in[W[k]] = True
            else:
                j = B[k - W.size]
                new_b[j] = bstate[j]
        return new_in, new_b


def _independent_eq_rows(A_eq):
    """Indices of a maximal independent subset of equality rows (sorted)."""
    m = A_eq.shape[0]
    if m == 0:
        return np.arange(0)
    D = A_eq.toarray() if sp.issparse(A_eq) else A_eq
    _, Rm, piv = sla.qr(D.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(Rm))
    tol = 1e-10 * max(1.0, float(d[0]) if d.size else 1.0)
    rank = int(np.sum(d > tol))
    return np.sort(piv[:rank])


def _nonzero_rows(A):
    if sp.issparse(A):
        return np.diff(A.indptr) > 0
    return np.any(A != 0.0, axis=1)


def _scale_rows(A, s):
    if sp.issparse(A):
        return sp.csr_matrix(sp.diags(s) @ A)
    return A * s[:, None]


def _hstack(blocks, dense):
    if dense:
        return np.hstack([b.toarray() if sp.issparse(b) else b for b in blocks])
    return sp.hstack(blocks, format="csr")


def _row_scale(A):
    if A.shape[0] == 0:
        return np.ones(0)
    if not sp.issparse(A):
        mx = np.max(np.abs(A), axis=1) if A.shape[1] else np.zeros(A.shape[0])
        mx = mx.copy()
        mx[mx == 0.0] = 1.0
        return 1.0 / mx
    mx = np.asarray(abs(A).max(axis=1).todense()).reshape(-1)
    mx[mx == 0.0] = 1.0
    return 1.0 / mx


def _fail(problem, status, iters=0):
    n = problem.n
    x = np.full(n, np.nan)
    return QpSolution(x, np.zeros(problem.m_eq), np.zeros(problem.m_in), np.zeros(n), np.zeros(n),
                      math.nan, status, math.inf, iters)


def solve_qp(problem, *, tol_feas=1e-8, tol_kkt=1e-8, max_iter=None, x0=None, hint=None, check=True):
    """Solve a convex QP; never raises on infeasible/unbounded input (see ``status``).

    ``x0`` is an optional starting point (need not be feasible) and ``hint`` an
    optional ``(active_in, bound_state)`` pair from a previous related solve.
    """
    if check:
        check_psd(problem.H)
    n = problem.n
    lb, ub = problem.lb, problem.ub
    if np.any(lb > ub + tol_feas * (1.0 + np.abs(lb))):
        return _fail(problem, INFEASIBLE)

    # -- presolve: fixed variables ------------------------------------------
    fixed = ub <= lb
    free = np.flatnonzero(~fixed)
    fix = np.flatnonzero(fixed)
    xfix = lb[fix]
    dense = n + problem.m_eq + problem.m_in <= DIRECT_THRESHOLD
    if dense:
        H, Aeq0, Ain0 = problem.H.toarray(), problem.A_eq.toarray(), problem.A_in.toarray()
    else:
        H, Aeq0, Ain0 = problem.H, problem.A_eq, problem.A_in
    Hff = H[free][:, free]
    c = problem.c[free] + (H[free][:, fix] @ xfix if fix.size else 0.0)
    A_eq = Aeq0[:, free]
    b_eq = problem.b_eq - (Aeq0[:, fix] @ xfix if fix.size else 0.0)
    A_in = Ain0[:, free]
    b_in = problem.b_in - (Ain0[:, fix] @ xfix if fix.size else 0.0)

    # empty rows
    eq_nz = _nonzero_rows(A_eq)
    in_nz = _nonzero_rows(A_in)
    bs = 1.0 + float(np.max(np.abs(problem.b_eq), initial=0.0))
    if np.any(np.abs(b_eq[~eq_nz]) > tol_feas * bs):
        return _fail(problem, INFEASIBLE)
    bsi = 1.0 + float(np.max(np.abs(problem.b_in), initial=0.0))
    if np.any(b_in[~in_nz] < -tol_feas * bsi):
        return _fail(problem, INFEASIBLE)
    eq_keep = np.flatnonzero(eq_nz)
    in_keep = np.flatnonzero(in_nz)
    A_eq, b_eq = A_eq[eq_keep], b_eq[eq_keep]
    A_in, b_in = A_in[in_keep], b_in[in_keep]

    s_eq = _row_scale(A_eq)
    s_in = _row_scale(A_in)
    A_eq = _scale_rows(A_eq, s_eq)
    b_eq = b_eq * s_eq
    A_in = _scale_rows(A_in, s_in)
    b_in = b_in * s_in

    indep = _independent_eq_rows(A_eq)
    dep = np.setdiff1d(np.arange(A_eq.shape[0]), indep)
    A_eq_i, b_eq_i = A_eq[indep], b_eq[indep]

    lbr, ubr = lb[free], ub[free]
    nf = free.size
    mx = 50 * (nf + A_eq.shape[0] + A_in.shape[0]) + 200 if max_iter is None else max_iter
    total_iters = 0

    # -- starting point ------------------------------------------------------
    xs = np.zeros(nf) if x0 is None else np.asarray(x0, dtype=float)[free].copy()
    xs = np.where(np.isfinite(xs), xs, 0.0)
    xs = np.minimum(np.maximum(xs, lbr), ubr)
    in_hint = np.zeros(A_in.shape[0], dtype=bool)
    b_hint = np.zeros(nf, dtype=np.int8)
    if hint is not None:
        h_in, h_b = hint
        if h_in is not None and len(h_in) == problem.m_in:
            in_hint = np.asarray(h_in, dtype=bool)[in_keep].copy()
        if h_b is not None and len(h_b) == n:
            b_hint = np.asarray(h_b, dtype=np.int8)[free].copy()
            b_hint[(b_hint < 0) & ~np.isfinite(lbr)] = 0
            b_hint[(b_hint > 0) & ~np.isfinite(ubr)] = 0
            xs = np.where(b_hint < 0, lbr, np.where(b_hint > 0, ubr, xs))

    feas_scale_eq = np.abs(b_eq) + 1.0
    feas_scale_in = np.abs(b_in) + 1.0
    r_eq = b_eq - A_eq @ xs
    r_in = A_in @ xs - b_in
    in_hint &= np.abs(r_in) <= tol_feas * feas_scale_in
    feasible_start = np.all(np.abs(r_eq) <= 0.1 * tol_feas * feas_scale_eq) and np.all(r_in <= 0.1 * tol_feas * feas_scale_in)

    core = _Core(Hff, c, A_eq_i, b_eq_i, A_in, b_in, lbr, ubr)
    stat_tol = 1e-2 * tol_kkt * core.gscale
    drop_tol = 1e-2 * tol_kkt * core.gscale

    if feasible_start:
        x = xs
        in_work, bstate = core.independent(in_hint, b_hint)
    else:
        # -- phase 1: minimise the sum of artificials ------------------------
        m_e = A_eq.shape[0]
        viol = np.flatnonzero(r_in > 0.0)
        sgn = np.where(r_eq >= 0.0, 1.0, -1.0)
        n1 = nf + m_e + viol.size
        Ae1 = _hstack([A_eq, sp.diags(sgn, shape=(m_e, m_e)), sp.csr_matrix((m_e, viol.size))], dense)
        Z = sp.csr_matrix((-np.ones(viol.size), (viol, np.arange(viol.size))), shape=(A_in.shape[0], viol.size))
        Ai1 = _hstack([A_in, sp.csr_matrix((A_in.shape[0], m_e)), Z], dense)
        c1 = np.concatenate([np.zeros(nf), np.ones(m_e + viol.size)])
        lb1 = np.concatenate([lbr, np.zeros(m_e + viol.size)])
        ub1 = np.concatenate([ubr, np.full(m_e + viol.size, np.inf)])
        x1 = np.concatenate([xs, np.abs(r_eq), r_in[viol]])
        core1 = _Core(np.zeros((n1, n1)) if dense else sp.csr_matrix((n1, n1)), c1, Ae1, b_eq, Ai1, b_in, lb1, ub1)
        b1 = np.concatenate([b_hint, np.zeros(m_e + viol.size, dtype=np.int8)])
        w1, b1 = core1.independent(in_hint.copy(), b1)
        st, x1, w1, b1, _, it = core1.run(x1, w1, b1, mx, 1e-3 * tol_feas, 1e-3 * tol_feas)
        total_iters += it
        if st == "singular":
            # restart phase 1 from an empty working set
            x1 = np.concatenate([xs, np.abs(r_eq), r_in[viol]])
            w1 = np.zeros(A_in.shape[0], dtype=bool)
            b1 = np.zeros(n1, dtype=np.int8)
            st, x1, w1, b1, _, it = core1.run(x1, w1, b1, mx, 1e-3 * tol_feas, 1e-3 * tol_feas)
            total_iters += it
        if st == MAX_ITER:
            return _fail(problem, MAX_ITER, total_iters)
        x = x1[:nf]
        viol_eq = np.abs(A_eq @ x - b_eq) / feas_scale_eq
        viol_in = (A_in @ x - b_in) / feas_scale_in
        worst = max(float(np.max(viol_eq, initial=0.0)), float(np.max(viol_in, initial=0.0)))
        if worst > tol_feas:
            return _fail(problem, INFEASIBLE, total_iters)
        in_work, bstate = core.independent(w1, b1[:nf].copy())

    st, x, in_work, bstate, nu, it = core.run(x, in_work, bstate, mx - total_iters, stat_tol, drop_tol)
    total_iters += it
    for _ in range(3):
        if st != "singular":
            break
        in_work, bstate = core.independent(in_work, bstate)
        st, x, in_work, bstate, nu, it = core.run(x, in_work, bstate, mx - total_iters, stat_tol, drop_tol)
        total_iters += it
    if st in (UNBOUNDED, MAX_ITER, "singular"):
        return _fail(problem, UNBOUNDED if st == UNBOUNDED else MAX_ITER, total_iters)

    # -- unscale / recover full-size primal and dual vectors -----------------
    xfull = np.empty(n)
    xfull[free] = x
    xfull[fix] = xfix
    m_e_keep = indep.size
    y_scaled = np.zeros(A_eq.shape[0])
    y_scaled[indep] = nu[:m_e_keep]
    z_scaled = np.where(in_work, nu[m_e_keep:], 0.0)
    y_eq = np.zeros(problem.m_eq)
    y_eq[eq_keep] = y_scaled * s_eq
    z_in = np.zeros(problem.m_in)
    z_in[in_keep] = z_scaled * s_in
    z_in = np.maximum(z_in, 0.0)
    w = H @ xfull + problem.c + problem.A_eq.T @ y_eq + problem.A_in.T @ z_in
    z_lb = np.zeros(n)
    z_ub = np.zeros(n)
    bfull = np.zeros(n, dtype=np.int8)
    bfull[free] = bstate
    at_lb = np.zeros(n, dtype=bool)
    at_ub = np.zeros(n, dtype=bool)
    at_lb[free] = bstate < 0
    at_ub[free] = bstate > 0
    z_lb[at_lb] = np.maximum(w[at_lb], 0.0)
    z_ub[at_ub] = np.maximum(-w[at_ub], 0.0)
    z_lb[fix] = np.maximum(w[fix], 0.0)
    z_ub[fix] = np.maximum(-w[fix], 0.0)
    bfull[fix] = np.where(w[fix] >= 0.0, -1, 1)
    active_in = np.zeros(problem.m_in, dtype=bool)
    active_in[in_keep] = in_work
    res = kkt_residual(problem, xfull, y_eq, z_in, z_lb, z_ub)
    sol = QpSolution(xfull, y_eq, z_in, z_lb, z_ub, problem.objective(xfull), OPTIMAL, res, total_iters,
                     active_in, bfull)
    if dep.size:
        # dependent equality rows were dropped; they must still hold
        if float(np.max(np.abs(A_eq[dep] @ x - b_eq[dep]) / feas_scale_eq[dep])) > tol_feas:
            return _fail(problem, INFEASIBLE, total_iters)
    return sol


def solve_lp(problem, **kw):
    """:func:`solve_qp` for a problem whose Hessian is zero."""
    if problem.H.nnz:
        raise QpError("solve_lp requires a zero Hessian")
    return solve_qp(problem, check=False, **kw)


# ---------------------------------------------------------------------------
# plain-text dump for cross-checking against external tools
# ---------------------------------------------------------------------------
def _write_mat(fh, name, M):
    C = sp.coo_matrix(M)
    fh.write(f"{name} {C.shape[0]} {C.shape[1]} {C.nnz}\n")
    order = np.lexsort((C.col, C.row))
    for r, col, v in zip(C.row[order], C.col[order], C.data[order]):
        fh.write(f"{r} {col} {float(v)!r}\n")


def _write_vec(fh, name, v):
    fh.write(f"{name} {len(v)}\n")
    for a in v:
        fh.write(f"{float(a)!r}\n")


def dump_qp(problem, path):
    """Write ``problem`` in the ``dccoord-qp v1`` text format (0-based triplets)."""
    with open(path, "w") as fh:
        fh.write("# dccoord-qp v1\n")
        fh.write(f"constant {problem.constant!r}\n")
        _write_mat(fh, "H", problem.H)
        _write_vec(fh, "c", problem.c)
        _write_mat(fh, "A_eq", problem.A_eq)
        _write_vec(fh, "b_eq", problem.b_eq)
        _write_mat(fh, "A_in", problem.A_in)
        _write_vec(fh, "b_in", problem.b_in)
        _write_vec(fh, "lb", problem.lb)
        _write_vec(fh, "ub", problem.ub)


def load_qp(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "# dccoord-qp v1":
        raise QpError(f"{path}: line 1: missing '# dccoord-qp v1' header")
    pos = 1
    parts = {}
    const = 0.0
    while pos < len(lines):
        head = lines[pos].split()
        pos += 1
        if head[0] == "constant":
            const = float(head[1])
        elif len(head) == 4:
            r, cnum, nnz = int(head[1]), int(head[2]), int(head[3])
            trip = np.array([ln.split() for ln in lines[pos:pos + nnz]], dtype=float).reshape(-1, 3)
            pos += nnz
            parts[head[0]] = sp.csr_matrix((trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))), shape=(r, cnum))
        else:
            m = int(head[1])
            parts[head[0]] = np.array([float(v) for v in lines[pos:pos + m]])
            pos += m
    return QuadraticProgram(parts["H"], parts["c"], parts["A_eq"], parts["b_eq"], parts["A_in"], parts["b_in"],
                            parts["lb"], parts["ub"], const)
