import copy

import numpy as np
import pytest

from dccoord.lower import (InfeasibleShift, conservation_residual, kkt_residual, latency_optimal_allocation,
                           reallocate)
from dccoord.model import NetDCModel, build_incidence, latency


def _netdc(G, alpha=1.0, bus=None):
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    conv = np.zeros((n, n))
    conv[np.arange(n), np.arange(n)] = 10.0
    return NetDCModel(n, G.shape[1], G, conv, tuple(range(n)), latency_loss_cap=alpha)


def test_single_dc_takes_everything():
    res = latency_optimal_allocation(_netdc([[0.3, 0.7]]), [[2.0, 5.0]])
    np.testing.assert_allclose(res.W[0], [[2.0, 5.0]], atol=1e-10)
    np.testing.assert_allclose(res.theta[0], [7.0], atol=1e-10)


def test_equally_remote_dcs_split_evenly():
    res = latency_optimal_allocation(_netdc([[0.0], [0.0]]), [[2.0]])
    np.testing.assert_allclose(res.W[0], [[1.0], [1.0]], atol=1e-9)


def test_nearest_dc_assignment():
    res = latency_optimal_allocation(_netdc([[1.0, 10.0], [10.0, 1.0]]), [[1.0, 1.0]])
    np.testing.assert_allclose(res.W[0], np.eye(2), atol=1e-4)


def test_allocation_is_unique_and_dominant():
    rng = np.random.default_rng(0)
    nd = _netdc(rng.uniform(0.1, 1.0, (3, 4)))
    delta = rng.uniform(1, 5, (2, 4))
    a, b = latency_optimal_allocation(nd, delta), latency_optimal_allocation(nd, delta)
    assert np.max(np.abs(a.W - b.W)) <= 1e-8
    for t in range(2):
        base = latency(a.W[t], nd.distance) + 0.5 * nd.alloc_reg * np.sum(a.W[t] ** 2)
        for _ in range(20):
            P = rng.dirichlet(np.ones(3), size=4).T * delta[t]
            other = latency(P, nd.distance) + 0.5 * nd.alloc_reg * np.sum(P ** 2)
            assert base <= other + 1e-9


def test_zero_shift_keeps_allocation():
    nd = _netdc([[1.0, 2.0], [2.0, 1.0]], alpha=0.5)
    delta = np.array([[1.0, 2.0]])
    base = latency_optimal_allocation(nd, delta)
    res = reallocate(nd, build_incidence(2, 1), [0.0], base.W, delta)
    np.testing.assert_allclose(res.W, base.W, atol=1e-9)
    assert abs(res.objective) <= 1e-12


def test_zero_cap_rejects_latency_increasing_shift():
    nd = _netdc([[1.0], [2.0]], alpha=0.0)
    delta = np.array([[2.0]])
    base = latency_optimal_allocation(nd, delta)
    # moving load from DC1 (near) to DC2 (far) strictly raises latency for the only user
    with pytest.raises(InfeasibleShift):
        reallocate(nd, build_incidence(2, 1), [-0.5], base.W, delta)
    # the opposite direction is infeasible by nonnegativity once DC2 is empty
    with pytest.raises(InfeasibleShift):
        reallocate(nd, build_incidence(2, 1), [0.5], base.W, delta)


def test_full_shift_to_remote_dc():
    nd = _netdc([[1.0], [2.0]], alpha=10.0)
    delta = np.array([[2.0]])
    base = latency_optimal_allocation(nd, delta)
    phi = np.array([-base.theta[0, 0]])
    res = reallocate(nd, build_incidence(2, 1), phi, base.W, delta)
    np.testing.assert_allclose(res.theta[0], base.theta[0] + np.array([1.0, -1.0]) * phi[0], atol=1e-12)
    np.testing.assert_allclose(res.theta[0], [0.0, 2.0], atol=1e-9)


def test_kkt_residual_examples():
    nd = _netdc([[1.0], [2.0]], alpha=1.0)
    delta = np.array([[2.0]])
    base = latency_optimal_allocation(nd, delta)
    phi = np.array([-0.5])
    res = reallocate(nd, build_incidence(2, 1), phi, base.W, delta)
    assert kkt_residual(res, phi, base.W, nd) <= 1e-6
    bad = copy.deepcopy(res)
    bad.duals["mu_delta"] = bad.duals["mu_delta"] + 1.0
    assert kkt_residual(bad, phi, base.W, nd) >= 1.0 - 1e-6


def test_kkt_residual_of_hand_built_point():
    # zero shift: W = W_dot, latency change 0, every multiplier zero satisfies the KKT system exactly
    nd = _netdc([[1.0], [3.0]], alpha=0.2)
    delta = np.array([[4.0]])
    base = latency_optimal_allocation(nd, delta)
    res = reallocate(nd, build_incidence(2, 1), [0.0], base.W, delta)
    hand = copy.deepcopy(res)
    hand.W = base.W.copy()
    hand.theta = base.W.sum(axis=2)
    for k in hand.duals:
        hand.duals[k] = np.zeros_like(hand.duals[k])
    assert kkt_residual(hand, [0.0], base.W, nd) <= 1e-10


def _random_case(rng, n, m, tau, alpha):
    nd = _netdc(rng.uniform(0.1, 1.0, (n, m)), alpha)
    delta = rng.uniform(0.5, 3.0, (tau, m))
    base = latency_optimal_allocation(nd, delta)
    topo = build_incidence(n, tau)
    return nd, delta, base, topo


def test_conservation_and_kkt_on_random_instances():
    rng = np.random.default_rng(42)
    hits = 0
    for trial in range(120):
        n, m, tau = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        nd, delta, base, topo = _random_case(rng, n, m, tau, float(rng.choice([0.1, 0.5, 1.0])))
        phi = rng.normal(0, 0.1, topo.k)
        try:
            res = reallocate(nd, topo, phi, base.W, delta)
        except InfeasibleShift:
            continue
        hits += 1
        assert conservation_residual(res, phi) <= 1e-8
        assert kkt_residual(res, phi, base.W, nd) <= 1e-6
        assert np.all(res.W >= -1e-12)
        for t in range(tau):
            assert latency(res.W[t] - base.W[t], nd.distance) <= nd.latency_loss_cap * latency(base.W[t], nd.distance) + 1e-9
    assert hits >= 20


def test_feasible_set_grows_with_alpha():
    rng = np.random.default_rng(7)
    for trial in range(30):
        nd, delta, base, topo = _random_case(rng, 3, 2, 2, 0.2)
        phi = rng.normal(0, 0.3, topo.k)
        try:
            reallocate(nd, topo, phi, base.W, delta)
        except InfeasibleShift:
            continue
        for a in (0.3, 1.0, 5.0):
            reallocate(nd.with_cap(a), topo, phi, base.W, delta)


def test_shape_errors():
    nd = _netdc([[1.0], [2.0]])
    base = latency_optimal_allocation(nd, [[1.0]])
    with pytest.raises(ValueError):
        reallocate(nd, build_incidence(2, 1), [0.0, 0.0], base.W, [[1.0]])
