"""Affine shift policies: training and the real-time rule.

* :func:`train_base` - L1-budgeted least squares onto per-record ideal shifts.
* :func:`train_concur` - cost- and feasibility-aware training: all records in
  one single-level problem with a shared policy and each record's follower
  embedded through its KKT system.
* :func:`coordinate_rt` - apply the policy if both the data-center operator
  and the grid can accept the shift, else fall back to no shift.
* :func:`sweep_epsilon` - retrain over a list of L1 budgets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bilevel import (_add_follower, _add_follower_kkt, _add_rt, _follower_inputs, _network_rows, _repair_fn,
                      _rt_data, dispatch_rt, min_shedding, solve_single_period_ideal)
from .bnb import BnbReport, MixedIntegerKktProblem, NodeLimitExceeded, branch_and_bound
from .build import QpBuilder
from .lower import InfeasibleShift, latency_optimal_allocation, lower_block, reallocate
from .model import FeatureSchema, ModelError, PolicySpec, apply_shift, build_incidence
from .qp import OPTIMAL, solve_qp

ACTIVE_TOL = 1e-7


@dataclass
class TrainingSet:
    """Single-period records sharing one feature schema.

    ``targets`` holds the ideal shifts (q x k) needed by :func:`train_base`.
    """

    records: list
    tag: str = "train"
    targets: np.ndarray = None
    ideal_costs: np.ndarray = None
    schema: FeatureSchema = None

    def __post_init__(self):
        if not self.records:
            raise ModelError("training set is empty")
        sizes = {None if r.features is None else r.features.shape[0] for r in self.records}
        if None in sizes or len(sizes) != 1:
            raise ModelError("every record needs a feature vector of the same length")
        if self.schema is not None and self.schema.size != sizes.pop():
            raise ModelError("feature vectors do not match the schema")
        if any(r.horizon != 1 for r in self.records):
            raise ModelError("training records must be single-period")
        if self.targets is not None:
            self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
            if self.targets.shape[0] != len(self.records):
                raise ModelError("one target shift per record")

    @property
    def q(self):
        return len(self.records)

    @property
    def X(self):
        return np.array([r.features for r in self.records])


@dataclass
class CoordinationOutcome:
    phi: np.ndarray
    branch: str
    cost: float
    netdc_ok: bool
    opf_ok: bool
    proposed: np.ndarray = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# record-level helpers
# ---------------------------------------------------------------------------
def baseline_theta(netdc, record):
    """Latency-optimal data-center loading for a single-period record."""
    return latency_optimal_allocation(netdc, record.compute_demand).theta[0]


def noncoordinated_cost(record, grid, netdc, r_bar=None):
    """Real-time dispatch cost with no shift."""
    return dispatch_rt(grid, netdc, record, baseline_theta(netdc, record), r_bar=r_bar).cost


def split_records(records, q, seed):
    """Seeded uniform split: ``q`` training records drawn without replacement, the rest for testing."""
    if not 0 < q <= len(records):
        raise ModelError(f"q must lie in [1, {len(records)}]")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(records), size=q, replace=False))
    mask = np.zeros(len(records), dtype=bool)
    mask[pick] = True
    train = [records[i] for i in np.flatnonzero(mask)]
    test = [records[i] for i in np.flatnonzero(~mask)]
    return train, test


def prepare_training_set(records, grid, netdc, r_bar=None, with_targets=True, tag="train", schema=None,
                         gap_tol=1e-6, node_limit=10**6):
    """Attach ideal shifts and costs (one single-period bilevel solve per record)."""
    targets, costs = None, None
    if with_targets:
        res = [solve_single_period_ideal(grid, netdc, r, r_bar=r_bar, gap_tol=gap_tol, node_limit=node_limit)
               for r in records]
        targets = np.array([x.phi for x in res])
        costs = np.array([x.cost for x in res])
    return TrainingSet(list(records), tag, targets, costs, schema)


def _standardizer(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-9 * np.maximum(1.0, np.abs(mu)), sd, 1.0)
    return mu, sd


def _design(tset):
    X = tset.X
    mu, sd = _standardizer(X)
    Z = (X - mu) / sd
    return np.hstack([np.ones((X.shape[0], 1)), Z]), mu, sd


def _add_budget(B, k, nf, eps, include_intercept):
    """Coefficients theta (k x (1+nf)), column 0 the intercept, with sum |theta| <= eps."""
    theta = B.add_vars("beta", (k, 1 + nf))
    s = B.add_vars("beta_abs", (k, 1 + nf), lb=0.0)
    I = np.eye(theta.size)
    B.add_in([(I, theta), (-I, s)], np.zeros(theta.size))
    B.add_in([(-I, theta), (-I, s)], np.zeros(theta.size))
    mask = np.ones((k, 1 + nf))
    if not include_intercept:
        mask[:, 0] = 0.0
    B.add_in([(mask.reshape(1, -1), s)], [float(eps)])
    return theta


def _spec(theta_val, eps, mu, sd, include_intercept, schema):
    theta_val = np.where(np.abs(theta_val) > 1e-12, theta_val, 0.0)
    return PolicySpec(theta_val[:, 0], theta_val[:, 1:], eps, mu, sd, include_intercept, schema)


def _schema(tset):
    return tset.schema if tset.schema is not None else FeatureSchema((("x", tset.X.shape[1]),))


# ---------------------------------------------------------------------------
# base regression
# ---------------------------------------------------------------------------
def train_base(tset, eps, include_intercept=True):
    """min (1/q) sum_i |beta0 + beta1 z_i - phi_i|^2  s.t.  |beta|_1 <= eps  (z standardized)."""
    if eps < 0:
        raise ModelError("eps must be >= 0")
    if tset.targets is None:
        raise ModelError("train_base needs ideal shifts on the training set")
    Z1, mu, sd = _design(tset)
    Y = tset.targets
    q, k = Y.shape
    B = QpBuilder()
    theta = _add_budget(B, k, Z1.shape[1] - 1, eps, include_intercept)
    G = 2.0 / q * (Z1.T @ Z1)
    for j in range(k):
        B.add_quad(theta[j], theta[j], G)
        B.add_linear(theta[j], -2.0 / q * (Z1.T @ Y[:, j]))
    B.constant = float(np.sum(Y * Y)) / q
    sol = solve_qp(B.build())
    if sol.status != OPTIMAL:
        raise ModelError(f"base regression failed ({sol.status})")
    return _spec(sol.x[theta], eps, mu, sd, include_intercept, _schema(tset))


def base_objective(policy, tset):
    pred = np.array([policy.predict(r.features) for r in tset.records])
    return float(np.mean(np.sum((pred - tset.targets) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# cost- and feasibility-aware training
# ---------------------------------------------------------------------------
@dataclass
class ConcurModel:
    problem: MixedIntegerKktProblem
    builder: QpBuilder
    tags: list
    mean: np.ndarray
    scale: np.ndarray


def build_concur(tset, grid, netdc, eps, r_bar=None, include_intercept=True):
    """Joint single-level problem over all training records with a shared policy."""
    if eps < 0:
        raise ModelError("eps must be >= 0")
    Z1, mu, sd = _design(tset)
    q = tset.q
    topology = build_incidence(netdc.n_dc, 1)
    k = topology.k
    B = QpBuilder()
    theta = _add_budget(B, k, Z1.shape[1] - 1, eps, include_intercept)
    I = np.eye(grid.n_buses)
    followers, tags = [], []
    for i, rec in enumerate(tset.records):
        tag = f"#{i}"
        d, w, p_dot, lo, hi = _rt_data(grid, rec, None, None, r_bar)
        W_dot, delta = _follower_inputs(netdc, rec, None)
        block = lower_block(netdc, topology, W_dot, delta)
        r, ell = _add_rt(B, grid, d, p_dot, lo, hi, tag=tag, weight=1.0 / q)
        phi = B.add_vars("phi" + tag, k)
        B.add_eq([(np.eye(k), phi), (-np.kron(np.eye(k), Z1[i][None, :]), theta)], np.zeros(k))
        xl, cap = _add_follower(B, block, phi, tag)
        _network_rows(B, grid, [(I, r), (I, ell), (-netdc.conversion, xl[block.ith[0]])], p_dot + w - d)
        followers.append((block, tag, "phi" + tag, xl, cap))
        tags.append(tag)
    sos, n_def, n_def_eq = [], 0, 0
    for block, tag, _, xl, cap in followers:
        s, nv, ne = _add_follower_kkt(B, block, xl, cap, tag)
        sos += s
        n_def += nv
        n_def_eq += ne
    qp = B.build()
    repair = _repair_fn(B, [(b, t, p) for b, t, p, _, _ in followers], qp.n)
    prob = MixedIntegerKktProblem(qp, (), sos, n_def, n_def_eq, repair)
    return ConcurModel(prob, B, tags, mu, sd)


def train_concur(tset, grid, netdc, eps, r_bar=None, include_intercept=True, gap_tol=1e-6, node_limit=10**6,
                 trace=None):
    """Returns (PolicySpec, per-record training cost, BnbReport).

    On node-limit exhaustion the incumbent is returned and the report carries
    status ``node_limit`` with its gap.
    """
    model = build_concur(tset, grid, netdc, eps, r_bar, include_intercept)
    B = model.builder
    x, rep = branch_and_bound(model.problem, gap_tol=gap_tol, node_limit=node_limit, trace=trace,
                              raise_on_limit=False)
    if x is None:
        raise NodeLimitExceeded("no incumbent for the joint training problem", None, rep)
    spec = _spec(x[B.blocks["beta"]], eps, model.mean, model.scale, include_intercept, _schema(tset))
    costs = np.array([_record_cost(grid, x[B.blocks["r" + t]], x[B.blocks["ell" + t]], rec)
                      for t, rec in zip(model.tags, tset.records)])
    return spec, costs, rep


def _record_cost(grid, r, ell, rec):
    p = rec.day_ahead_dispatch + r
    return float(grid.gen_cost_lin @ p + p @ grid.gen_cost_quad @ p + grid.shed_cost @ ell)


# ---------------------------------------------------------------------------
# real-time rule
# ---------------------------------------------------------------------------
def _screen(policy, record, grid, netdc, r_bar, cap_tol, shed_tol):
    if record.features is None:
        raise ModelError("record has no features")
    topology = build_incidence(netdc.n_dc, 1)
    phi = policy.predict(record.features)
    alloc0 = latency_optimal_allocation(netdc, record.compute_demand)
    theta_dot = alloc0.theta[0]
    try:
        reallocate(netdc, topology, phi, alloc0.W, record.compute_demand, cap_tol)
        netdc_ok = True
    except InfeasibleShift:
        netdc_ok = False
    theta_new = apply_shift(topology, phi, theta_dot)
    shed = min_shedding(grid, netdc, record, theta_new, r_bar=r_bar)
    scale = max(1.0, float(np.sum(record.loads)))
    return phi, theta_dot, theta_new, netdc_ok, bool(shed <= shed_tol * scale)


def screen(policy, record, grid, netdc, r_bar=None, cap_tol=1e-6, shed_tol=1e-6):
    """(netdc_ok, opf_ok) for the proposed shift, without the dispatch solve."""
    return _screen(policy, record, grid, netdc, r_bar, cap_tol, shed_tol)[3:]


def coordinate_rt(policy, record, grid, netdc, r_bar=None, cap_tol=1e-6, shed_tol=1e-6):
    """Apply phi = policy(x) if the operator accepts it and the grid serves all load, else phi = 0."""
    phi, theta_dot, theta_new, netdc_ok, opf_ok = _screen(policy, record, grid, netdc, r_bar, cap_tol, shed_tol)
    if netdc_ok and opf_ok:
        res = dispatch_rt(grid, netdc, record, theta_new, r_bar=r_bar)
        if res.status == OPTIMAL:
            return CoordinationOutcome(phi, "policy", res.cost, True, True, phi)
    res = dispatch_rt(grid, netdc, record, theta_dot, r_bar=r_bar)
    return CoordinationOutcome(np.zeros_like(phi), "fallback", res.cost, netdc_ok, opf_ok, phi)


def evaluate(policy, records, grid, netdc, r_bar=None):
    return [coordinate_rt(policy, r, grid, netdc, r_bar) for r in records]


def violation_rates(outcomes):
    """Fractions of records whose proposed shift fails the grid / operator screen."""
    n = max(len(outcomes), 1)
    return (sum(not o.opf_ok for o in outcomes) / n, sum(not o.netdc_ok for o in outcomes) / n)


def screen_rates(policy, records, grid, netdc, r_bar=None):
    """Same as ``violation_rates(evaluate(...))`` without the dispatch solves."""
    flags = [screen(policy, r, grid, netdc, r_bar) for r in records]
    n = max(len(flags), 1)
    return (sum(not g for _, g in flags) / n, sum(not d for d, _ in flags) / n)


# ---------------------------------------------------------------------------
# budget sweep
# ---------------------------------------------------------------------------
@dataclass
class SweepRow:
    eps: float
    active: int
    avg_test_cost: float
    policy: PolicySpec
    train_cost: float
    report: BnbReport


def sweep_epsilon(tset, grid, netdc, eps_list, r_bar=None, test_records=None, include_intercept=True,
                  gap_tol=1e-6, node_limit=10**6):
    """One joint training per budget; rows ordered by budget, largest first."""
    eps_list = list(eps_list)
    if not eps_list:
        raise ModelError("eps_list is empty")
    test = tset.records if test_records is None else test_records
    rows = []
    for eps in sorted(eps_list, reverse=True):
        spec, costs, rep = train_concur(tset, grid, netdc, eps, r_bar, include_intercept, gap_tol, node_limit)
        outs = evaluate(spec, test, grid, netdc, r_bar)
        rows.append(SweepRow(float(eps), int(spec.active_features(ACTIVE_TOL).size),
                             float(np.mean([o.cost for o in outs])), spec, float(np.mean(costs)), rep))
    return rows
