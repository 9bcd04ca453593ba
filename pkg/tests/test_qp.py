import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from dccoord.qp import (INFEASIBLE, OPTIMAL, UNBOUNDED, QpError, QuadraticProgram, dump_qp, load_qp, solve_lp,
                        solve_qp)

cvxopt = pytest.importorskip("cvxopt")
cvxopt.solvers.options["show_progress"] = False
cvxopt.solvers.options["abstol"] = 1e-11
cvxopt.solvers.options["reltol"] = 1e-11
cvxopt.solvers.options["feastol"] = 1e-11


def test_symmetric_equality():
    qp = QuadraticProgram(2.0 * np.eye(3), np.zeros(3), np.ones((1, 3)), [1.0])
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, [1 / 3] * 3, atol=1e-12)
    assert abs(sol.objective - 1 / 3) < 1e-12


def test_active_bound_dual():
    sol = solve_qp(QuadraticProgram(np.zeros((1, 1)), [1.0], A_in=[[-1.0]], b_in=[-2.0]))
    assert sol.status == OPTIMAL
    assert abs(sol.x[0] - 2.0) < 1e-12 and abs(sol.z_in[0] - 1.0) < 1e-12
    sol = solve_qp(QuadraticProgram(np.zeros((1, 1)), [1.0], lb=[2.0]))
    assert abs(sol.x[0] - 2.0) < 1e-12 and abs(sol.z_lb[0] - 1.0) < 1e-12


def test_equality_qp_matches_kkt_system():
    rng = np.random.default_rng(3)
    for _ in range(10):
        M = rng.normal(size=(5, 5))
        H = M @ M.T
        c = rng.normal(size=5)
        A = rng.normal(size=(2, 5))
        b = rng.normal(size=2)
        K = np.block([[H, A.T], [A, np.zeros((2, 2))]])
        sol_ref = np.linalg.solve(K, np.concatenate([-c, b]))
        sol = solve_qp(QuadraticProgram(H, c, A, b))
        np.testing.assert_allclose(sol.x, sol_ref[:5], atol=1e-9)
        np.testing.assert_allclose(sol.y_eq, sol_ref[5:], atol=1e-8)


def _cvxopt(H, c, Aeq, beq, Ain, bin_, lb, ub):
    n = c.size
    G = [Ain, -np.eye(n)[np.isfinite(lb)], np.eye(n)[np.isfinite(ub)]]
    h = [bin_, -lb[np.isfinite(lb)], ub[np.isfinite(ub)]]
    G, h = np.vstack(G), np.concatenate(h)
    args = [cvxopt.matrix(H), cvxopt.matrix(c), cvxopt.matrix(G), cvxopt.matrix(h)]
    if beq.size:
        args += [cvxopt.matrix(Aeq), cvxopt.matrix(beq)]
    res = cvxopt.solvers.qp(*args)
    return res["status"], np.array(res["x"]).ravel(), res["primal objective"]


def test_random_qps_match_interior_point_oracle():
    rng = np.random.default_rng(11)
    checked = 0
    for trial in range(40):
        n = int(rng.integers(2, 9))
        r = int(rng.integers(0, n + 1))
        M = rng.normal(size=(n, r))
        H = M @ M.T + 1e-3 * np.eye(n)
        c = rng.normal(size=n)
        me, mi = int(rng.integers(0, 3)), int(rng.integers(0, 6))
        x0 = rng.uniform(0, 1, n)
        Aeq = rng.normal(size=(me, n))
        beq = Aeq @ x0
        Ain = rng.normal(size=(mi, n))
        bin_ = Ain @ x0 + rng.uniform(0, 1, mi)
        lb = np.where(rng.random(n) < 0.7, 0.0, -np.inf)
        ub = np.where(rng.random(n) < 0.5, 2.0, np.inf)
        sol = solve_qp(QuadraticProgram(H, c, Aeq, beq, Ain, bin_, lb, ub))
        st, xo, fo = _cvxopt(H, c, Aeq, beq, Ain, bin_, lb, ub)
        assert sol.status == OPTIMAL
        assert st == "optimal"
        assert abs(sol.objective - fo) <= 1e-6 * max(1.0, abs(fo))
        assert sol.kkt_residual <= 1e-8
        assert np.all(sol.z_in >= 0) and np.all(sol.z_lb >= 0) and np.all(sol.z_ub >= 0)
        checked += 1
    assert checked == 40


def test_weak_duality_and_scaling_invariance():
    rng = np.random.default_rng(5)
    M = rng.normal(size=(6, 6))
    qp = QuadraticProgram(M @ M.T, rng.normal(size=6), rng.normal(size=(1, 6)), [0.5], rng.normal(size=(4, 6)),
                          np.ones(4), np.full(6, -3.0), np.full(6, 3.0))
    sol = solve_qp(qp)
    assert sol.objective >= sol.dual_objective(qp) - 1e-8
    assert abs(sol.objective - sol.dual_objective(qp)) <= 1e-8 * max(1.0, abs(sol.objective))
    sol2 = solve_qp(qp.scaled(250.0))
    np.testing.assert_allclose(sol2.x, sol.x, atol=1e-8)


def test_restart_determinism():
    rng = np.random.default_rng(8)
    M = rng.normal(size=(7, 3))
    qp = QuadraticProgram(M @ M.T, rng.normal(size=7), A_in=rng.normal(size=(5, 7)), b_in=np.ones(5), lb=np.zeros(7))
    a, b = solve_qp(qp), solve_qp(qp)
    assert a.status == b.status
    assert np.array_equal(a.x, b.x) and np.array_equal(a.z_in, b.z_in)


def test_infeasible_and_unbounded():
    sol = solve_lp(QuadraticProgram(None, [1.0, 1.0], A_in=[[1.0, 1.0], [-1.0, -1.0]], b_in=[1.0, -2.0]))
    assert sol.status == INFEASIBLE
    sol = solve_lp(QuadraticProgram(None, [-1.0], lb=[0.0]))
    assert sol.status == UNBOUNDED
    sol = solve_qp(QuadraticProgram(np.zeros((1, 1)), [0.0], [[1.0]], [5.0]))
    assert sol.status == OPTIMAL and abs(sol.x[0] - 5.0) < 1e-12


def test_transportation_lp_matches_vertex_enumeration():
    # 2 supplies x 2 demands, cost c_ij, supply s, demand d (balanced)
    cost = np.array([4.0, 6.0, 5.0, 3.0])
    s, d = np.array([30.0, 20.0]), np.array([25.0, 25.0])
    A = np.array([[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0], [0, 1, 0, 1]], dtype=float)
    b = np.concatenate([s, d])
    sol = solve_lp(QuadraticProgram(None, cost, A, b, lb=np.zeros(4)))
    best = np.inf
    for basis in itertools.combinations(range(4), 3):
        Ab = A[:, basis]
        try:
            xb = np.linalg.lstsq(Ab, b, rcond=None)[0]
        except np.linalg.LinAlgError:
            continue
        x = np.zeros(4)
        x[list(basis)] = xb
        if np.allclose(A @ x, b) and np.all(x >= -1e-9):
            best = min(best, cost @ x)
    assert sol.status == OPTIMAL
    assert abs(sol.objective - best) < 1e-9


def test_rejects_indefinite_hessian():
    with pytest.raises(QpError):
        solve_qp(QuadraticProgram([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0]))
    with pytest.raises(QpError):
        solve_lp(QuadraticProgram(np.eye(2), [0.0, 0.0]))


def test_sparse_path_matches_dense(tmp_path):
    rng = np.random.default_rng(1)
    n = 150
    H = sp.diags(rng.uniform(0.1, 1.0, n)).tocsr()
    A_in = sp.random(60, n, density=0.05, random_state=2, format="csr")
    qp = QuadraticProgram(H, rng.normal(size=n), sp.csr_matrix(np.ones((1, n))), [10.0], A_in, np.ones(60),
                          np.zeros(n), np.full(n, 5.0))
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL and sol.kkt_residual <= 1e-8
    path = tmp_path / "qp.txt"
    dump_qp(qp, path)
    again = solve_qp(load_qp(path))
    assert np.array_equal(again.x, sol.x)
