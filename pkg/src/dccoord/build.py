"""Incremental assembly of sparse QPs from named variable blocks."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .qp import QuadraticProgram


class QpBuilder:
    def __init__(self):
        self.n = 0
        self.blocks = {}
        self._lb, self._ub, self._c = [], [], []
        self._h = ([], [], [])
        self._eq = ([], [], [])
        self._beq = []
        self._in = ([], [], [])
        self._bin = []
        self.constant = 0.0

    # -- variables -----------------------------------------------------------
    def add_vars(self, name, shape, lb=-np.inf, ub=np.inf, cost=0.0):
        size = int(np.prod(shape))
        idx = (self.n + np.arange(size)).reshape(shape)
        self.n += size
        self._lb.append(np.broadcast_to(np.asarray(lb, dtype=float), shape).reshape(-1).copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, dtype=float), shape).reshape(-1).copy())
        self._c.append(np.broadcast_to(np.asarray(cost, dtype=float), shape).reshape(-1).copy())
        self.blocks[name] = idx
        return idx

    def add_linear(self, idx, vals):
        idx = np.asarray(idx).reshape(-1)
        c = np.concatenate(self._c) if self._c else np.zeros(0)
        np.add.at(c, idx, np.asarray(vals, dtype=float).reshape(-1))
        self._c = [c]

    def fix(self, values):
        """Pin named blocks to given values through their bounds."""
        lb, ub = np.concatenate(self._lb), np.concatenate(self._ub)
        for name, val in values.items():
            idx = self.blocks[name]
            lb[idx] = val
            ub[idx] = val
        self._lb, self._ub = [lb], [ub]

    def clear_objective(self):
        self._c = [np.zeros(self.n)]
        self._h = ([], [], [])
        self.constant = 0.0

    def add_quad(self, rows, cols, M):
        """Add 1/2 x[rows]' M x[cols] to the objective Hessian block."""
        M = sp.coo_matrix(M)
        rows = np.asarray(rows).reshape(-1)
        cols = np.asarray(cols).reshape(-1)
        self._h[0].append(rows[M.row])
        self._h[1].append(cols[M.col])
        self._h[2].append(M.data)

    # -- rows ----------------------------------------------------------------
    @property
    def m_eq(self):
        return len(self._beq) and int(sum(len(b) for b in self._beq))

    @property
    def m_in(self):
        return len(self._bin) and int(sum(len(b) for b in self._bin))

    def _add_rows(self, store, bstore, terms, rhs):
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float)).reshape(-1)
        base = int(sum(len(b) for b in bstore))
        for M, cols in terms:
            M = sp.coo_matrix(np.atleast_2d(M) if not sp.issparse(M) else M)
            if M.shape[0] != rhs.size:
                raise ValueError("row block height does not match rhs")
            cols = np.asarray(cols).reshape(-1)
            if M.shape[1] != cols.size:
                raise ValueError("row block width does not match column index list")
            store[0].append(base + M.row)
            store[1].append(cols[M.col])
            store[2].append(M.data)
        bstore.append(rhs)
        return base + np.arange(rhs.size)

    def add_eq(self, terms, rhs):
        """Rows sum_k M_k x[cols_k] = rhs; returns the new row indices."""
        return self._add_rows(self._eq, self._beq, terms, rhs)

    def add_in(self, terms, rhs):
        """Rows sum_k M_k x[cols_k] <= rhs; returns the new row indices."""
        return self._add_rows(self._in, self._bin, terms, rhs)

    # -- output --------------------------------------------------------------
    def _mat(self, store, m):
        if not store[0]:
            return sp.csr_matrix((m, self.n))
        return sp.csr_matrix((np.concatenate(store[2]), (np.concatenate(store[0]), np.concatenate(store[1]))),
                             shape=(m, self.n))

    def build(self):
        n = self.n
        H = self._mat(self._h, n) if self._h[0] else sp.csr_matrix((n, n))
        H = sp.csr_matrix(H)
        beq = np.concatenate(self._beq) if self._beq else np.zeros(0)
        bin_ = np.concatenate(self._bin) if self._bin else np.zeros(0)
        return QuadraticProgram(H, np.concatenate(self._c) if self._c else np.zeros(0),
                                self._mat(self._eq, beq.size), beq, self._mat(self._in, bin_.size), bin_,
                                np.concatenate(self._lb) if self._lb else np.zeros(0),
                                np.concatenate(self._ub) if self._ub else np.zeros(0), self.constant)
