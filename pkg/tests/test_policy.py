import numpy as np
import pytest

from dccoord.bilevel import dispatch_rt, solve_single_period_ideal
from dccoord.bnb import brute_force_oracle
from dccoord.model import ModelError, PolicySpec, ScenarioRecord, apply_shift, build_incidence
from dccoord.policy import (TrainingSet, base_objective, baseline_theta, build_concur, coordinate_rt,
                            noncoordinated_cost, prepare_training_set, split_records, sweep_epsilon, train_base,
                            train_concur, violation_rates)
from dccoord.synth import make_records, tiny_training_instance, toy_system


def _plain_set(X, Y):
    recs = [ScenarioRecord([[1.0]], [[0.0]], [[1.0]], features=x) for x in np.atleast_2d(X)]
    return TrainingSet(recs, targets=np.atleast_2d(Y))


def test_base_zero_budget_gives_zero_policy():
    rng = np.random.default_rng(0)
    ts = _plain_set(rng.normal(size=(6, 3)), rng.normal(size=(6, 2)))
    p = train_base(ts, 0.0)
    assert np.all(p.intercept == 0) and np.all(p.weights == 0)
    np.testing.assert_array_equal(p.predict(ts.records[0].features), [0.0, 0.0])


def test_base_constant_targets_absorbed_by_intercept():
    rng = np.random.default_rng(1)
    v = np.array([0.7, -1.2])
    ts = _plain_set(rng.normal(size=(5, 3)), np.tile(v, (5, 1)))
    p = train_base(ts, np.abs(v).sum() + 0.5)
    np.testing.assert_allclose(p.intercept, v, atol=1e-9)
    np.testing.assert_allclose(p.weights, 0.0, atol=1e-9)
    assert base_objective(p, ts) <= 1e-12


def test_base_two_points_match_least_squares():
    x = np.array([[1.0], [3.0]])
    y = np.array([[2.0], [5.0]])
    # unconstrained fit passes through both points: slope 1.5, intercept 0.5
    p = train_base(_plain_set(x, y), 100.0)
    for xi, yi in zip(x, y):
        assert abs(p.predict(xi)[0] - yi[0]) <= 1e-8
    assert abs(p.predict([2.0])[0] - 3.5) <= 1e-8


def test_base_optimality_certificate():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(12, 4)), rng.normal(size=(12, 1))
    ts = _plain_set(X, Y)
    for eps in (0.3, 1.0, 3.0):
        p = train_base(ts, eps)
        assert p.l1_norm() <= eps + 1e-9
        best = base_objective(p, ts)
        for _ in range(50):
            b = rng.normal(size=5)
            b *= eps / np.abs(b).sum() * rng.uniform(0, 1)
            other = PolicySpec(b[:1], b[None, 1:], eps, p.feature_mean, p.feature_scale)
            assert best <= base_objective(other, ts) + 1e-9
        again = train_base(ts, eps)
        assert abs(base_objective(again, ts) - best) <= 1e-8


def test_intercept_flag():
    ts = _plain_set(np.array([[0.0], [1.0], [2.0]]), np.array([[5.0], [5.0], [5.0]]))
    p = train_base(ts, 1.0, include_intercept=False)
    np.testing.assert_allclose(p.intercept, [5.0], atol=1e-9)
    assert p.l1_norm() <= 1.0 + 1e-9


def test_training_set_validation():
    with pytest.raises(ModelError):
        TrainingSet([])
    a = ScenarioRecord([[1.0]], [[0.0]], [[1.0]], features=[1.0, 2.0])
    b = ScenarioRecord([[1.0]], [[0.0]], [[1.0]], features=[1.0])
    with pytest.raises(ModelError):
        TrainingSet([a, b])
    with pytest.raises(ModelError):
        train_base(TrainingSet([a]), 1.0)
    with pytest.raises(ModelError):
        train_base(TrainingSet([a], targets=[[0.0]]), -1.0)


def _coupled(seed):
    grid, netdc, recs = tiny_training_instance(seed)
    return grid, netdc, prepare_training_set(recs, grid, netdc)


def test_concur_zero_budget_equals_noncoordinated():
    grid, netdc, ts = _coupled(4)
    spec, costs, _ = train_concur(ts, grid, netdc, 0.0)
    assert spec.l1_norm() == 0.0
    none = np.array([noncoordinated_cost(r, grid, netdc) for r in ts.records])
    np.testing.assert_allclose(costs, none, rtol=1e-9, atol=1e-9)


def test_concur_single_record_reaches_ideal():
    grid, netdc, ts = _coupled(12)
    assert ts.q == 1
    spec, costs, _ = train_concur(ts, grid, netdc, 1e3)
    assert abs(costs[0] - ts.ideal_costs[0]) <= 1e-6 * max(1.0, ts.ideal_costs[0])


@pytest.mark.parametrize("seed", [4, 6, 25, 26])
def test_concur_between_ideal_and_none_and_matches_oracle(seed):
    grid, netdc, ts = _coupled(seed)
    eps = 0.5 * np.abs(ts.targets).sum() / ts.q
    spec, costs, rep = train_concur(ts, grid, netdc, eps)
    none = np.mean([noncoordinated_cost(r, grid, netdc) for r in ts.records])
    assert ts.ideal_costs.mean() < costs.mean() < none
    assert spec.l1_norm() <= eps + 1e-9
    model = build_concur(ts, grid, netdc, eps)
    obj, _ = brute_force_oracle(model.problem, max_patterns=12)
    assert abs(rep.objective - obj) <= 1e-6 * max(1.0, obj)
    assert abs(costs.mean() - obj) <= 1e-6 * max(1.0, obj)


def _zero_policy(netdc, nf):
    k = build_incidence(netdc.n_dc, 1).k
    return PolicySpec(np.zeros(k), np.zeros((k, nf)), 0.0)


def test_zero_policy_reproduces_noncoordinated_cost():
    grid, netdc, ts = _coupled(11)
    for rec in ts.records:
        out = coordinate_rt(_zero_policy(netdc, rec.features.size), rec, grid, netdc)
        assert np.all(out.phi == 0)
        assert out.cost == noncoordinated_cost(rec, grid, netdc)


def test_cap_violation_falls_back():
    grid, netdc, ts = _coupled(11)
    rec = ts.records[0]
    k = 1
    huge = PolicySpec(np.full(k, 50.0), np.zeros((k, rec.features.size)), 100.0)
    out = coordinate_rt(huge, rec, grid, netdc)
    assert out.branch == "fallback" and not out.netdc_ok
    assert np.all(out.phi == 0)
    assert out.cost == noncoordinated_cost(rec, grid, netdc)
    assert violation_rates([out])[1] == 1.0


def test_congestion_relieving_shift_lowers_cost():
    grid, netdc, ts = _coupled(20)
    rec = ts.records[0]
    ideal = solve_single_period_ideal(grid, netdc, rec)
    spec = PolicySpec(ideal.phi, np.zeros((1, rec.features.size)), 1e3)
    out = coordinate_rt(spec, rec, grid, netdc)
    assert out.branch == "policy"
    topo = build_incidence(netdc.n_dc, 1)
    expect = dispatch_rt(grid, netdc, rec, apply_shift(topo, ideal.phi, baseline_theta(netdc, rec))).cost
    assert out.cost == expect
    assert out.cost < noncoordinated_cost(rec, grid, netdc)
    assert abs(out.cost - ideal.cost) <= 1e-6 * max(1.0, ideal.cost)


def test_split_is_seeded_and_disjoint():
    recs = list(range(20))
    a_tr, a_te = split_records(recs, 7, 3)
    b_tr, b_te = split_records(recs, 7, 3)
    assert a_tr == b_tr and a_te == b_te
    assert sorted(a_tr + a_te) == recs and len(a_tr) == 7
    with pytest.raises(ModelError):
        split_records(recs, 0, 1)


@pytest.fixture(scope="module")
def toy_data():
    sysm = toy_system(0, n_scenarios=8)
    recs = make_records(sysm, 16, seed=1)
    train, test = split_records(recs, 8, 0)
    ts = prepare_training_set(train, sysm.grid, sysm.netdc, schema=sysm.schema)
    return sysm, ts, test


def test_training_ordering_on_toy(toy_data):
    sysm, ts, _ = toy_data
    spec, costs, _ = train_concur(ts, sysm.grid, sysm.netdc, 5.0)
    none = np.mean([noncoordinated_cost(r, sysm.grid, sysm.netdc) for r in ts.records])
    tol = 1e-6 * max(1.0, none)
    assert ts.ideal_costs.mean() <= costs.mean() + tol
    assert costs.mean() <= none + tol


def test_sweep_rows(toy_data):
    sysm, ts, test = toy_data
    rows = sweep_epsilon(ts, sysm.grid, sysm.netdc, [0.0, 1.0, 5.0], test_records=test)
    assert [r.eps for r in rows] == [5.0, 1.0, 0.0]
    assert rows[-1].active == 0
    for r in rows:
        assert r.policy.l1_norm() <= r.eps + 1e-9
    zero = rows[-1].avg_test_cost
    none = np.mean([noncoordinated_cost(r, sysm.grid, sysm.netdc) for r in test])
    assert zero == pytest.approx(none, rel=1e-12)
    assert min(r.avg_test_cost for r in rows) <= zero
    with pytest.raises(ModelError):
        sweep_epsilon(ts, sysm.grid, sysm.netdc, [])
