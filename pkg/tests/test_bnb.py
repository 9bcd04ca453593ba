import io

import numpy as np
import pytest

from dccoord.bilevel import build_day_ahead
from dccoord.bnb import MixedIntegerKktProblem, NodeLimitExceeded, branch_and_bound, brute_force_oracle
from dccoord.qp import QuadraticProgram
from dccoord.synth import tiny_instance


def test_no_discrete_structure_is_one_node():
    qp = QuadraticProgram(2.0 * np.eye(2), [-2.0, -4.0], lb=[0.0, 0.0], ub=[3.0, 3.0])
    x, rep = branch_and_bound(MixedIntegerKktProblem(qp))
    assert rep.nodes == 1
    np.testing.assert_allclose(x, [1.0, 2.0], atol=1e-12)


def test_single_complementarity_pair():
    # min (x-1)^2 + (y-1)^2, x, y >= 0, x * y = 0  ->  objective 1
    qp = QuadraticProgram(2.0 * np.eye(2), [-2.0, -2.0], lb=[0.0, 0.0], constant=2.0)
    prob = MixedIntegerKktProblem(qp, sos1=((("x", 0), ("x", 1)),))
    x, rep = branch_and_bound(prob)
    assert rep.nodes <= 3
    assert abs(rep.objective - 1.0) <= 1e-9
    assert min(abs(x[0]), abs(x[1])) <= 1e-9
    # row members: slack of x <= 2 complementary with y
    qp = QuadraticProgram(2.0 * np.eye(2), [-6.0, -2.0], A_in=[[1.0, 0.0]], b_in=[2.0], lb=[0.0, 0.0], constant=10.0)
    x, rep = branch_and_bound(MixedIntegerKktProblem(qp, sos1=((("row", 0), ("x", 1)),)))
    obj, _ = brute_force_oracle(MixedIntegerKktProblem(qp, sos1=((("row", 0), ("x", 1)),)))
    assert abs(rep.objective - obj) <= 1e-9


def _random_miqp(rng):
    n = int(rng.integers(3, 7))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    c = rng.normal(0, 3, n)
    nb = int(rng.integers(0, 3))
    lb, ub = np.zeros(n), np.full(n, 4.0)
    ub[:nb] = 1.0
    A_in = rng.normal(size=(2, n))
    b_in = A_in @ np.full(n, 0.5) + rng.uniform(0, 1, 2)
    pairs = []
    free = list(range(nb, n))
    for _ in range(int(rng.integers(0, 3))):
        if len(free) >= 2:
            i, j = free.pop(), free.pop()
            pairs.append((("x", i), ("x", j)))
    if rng.random() < 0.5 and free:
        pairs.append((("row", 0), ("x", free.pop())))
    qp = QuadraticProgram(H, c, A_in=A_in, b_in=b_in, lb=lb, ub=ub)
    return MixedIntegerKktProblem(qp, np.arange(nb), tuple(pairs))


def test_random_problems_match_enumeration():
    rng = np.random.default_rng(17)
    for _ in range(60):
        prob = _random_miqp(rng)
        obj, _ = brute_force_oracle(prob)
        x, rep = branch_and_bound(prob)
        if not np.isfinite(obj):
            assert x is None
            continue
        assert abs(rep.objective - obj) <= 1e-6 * max(1.0, abs(obj))
        assert prob.is_feasible(x)


def test_infeasible_problem():
    # relaxation feasible (x0 in [0.1, 0.5]) but neither x0 = 0 nor x0 = 1 admits x1 in [0, 0.4]
    qp = QuadraticProgram(np.eye(2), [0.0, 0.0], A_eq=[[1.0, 1.0]], b_eq=[0.5], lb=[0.0, 0.0], ub=[1.0, 0.4])
    x, rep = branch_and_bound(MixedIntegerKktProblem(qp, [0]))
    assert x is None and rep.status == "infeasible"
    obj, _ = brute_force_oracle(MixedIntegerKktProblem(qp, [0]))
    assert obj == np.inf


def test_node_limit_reports_incumbent_and_gap():
    rng = np.random.default_rng(3)
    n = 8
    qp = QuadraticProgram(np.eye(n), -rng.uniform(0.5, 1.5, n), A_in=np.ones((1, n)), b_in=[3.5], lb=np.zeros(n),
                          ub=np.ones(n))
    prob = MixedIntegerKktProblem(qp, np.arange(n))
    with pytest.raises(NodeLimitExceeded) as ei:
        branch_and_bound(prob, node_limit=2, heuristic_every=1)
    assert ei.value.report.status == "node_limit"
    x, rep = branch_and_bound(prob, node_limit=2, raise_on_limit=False)
    assert rep.status == "node_limit"
    assert rep.gap >= 0


def test_trace_and_determinism():
    rng = np.random.default_rng(5)
    prob = _random_miqp(rng)
    while not prob.sos1 and prob.binaries.size == 0:
        prob = _random_miqp(rng)
    buf_a, buf_b = io.StringIO(), io.StringIO()
    xa, ra = branch_and_bound(prob, trace=buf_a)
    xb, rb = branch_and_bound(prob, trace=buf_b)
    assert buf_a.getvalue() == buf_b.getvalue()
    assert buf_a.getvalue().count("\n") == ra.nodes
    if xa is not None:
        assert np.array_equal(xa, xb)


@pytest.mark.parametrize("seed", range(6))
def test_tiny_day_ahead_matches_enumeration(seed):
    grid, netdc, topo, scen = tiny_instance(seed, max_patterns=8)
    model = build_day_ahead(grid, netdc, topo, scen)
    obj, _ = brute_force_oracle(model.problem, max_patterns=8)
    x, rep = branch_and_bound(model.problem)
    assert abs(rep.objective - obj) <= 1e-6 * max(1.0, abs(obj))


def test_oracle_guard():
    qp = QuadraticProgram(np.eye(20), np.zeros(20), lb=np.zeros(20), ub=np.ones(20))
    with pytest.raises(ValueError):
        brute_force_oracle(MixedIntegerKktProblem(qp, np.arange(20)))
