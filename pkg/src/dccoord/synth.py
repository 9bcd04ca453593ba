"""Synthetic systems and scenario records.

* ``n_zones == 11``: a NYISO-like zonal aggregation (zones A..K, 12 corridors,
  cheap generation upstate, load concentrated downstate).
* ``n_zones == 3``: a small congested toy system.
* other sizes: random connected zonal graphs.

Everything is drawn from ``numpy.random.default_rng(seed)`` so a seed fixes
the output byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bilevel import dispatch_rt, solve_uc
from .lower import latency_optimal_allocation
from .model import FeatureSchema, GridModel, ModelError, NetDCModel, ScenarioRecord, features_assemble
from .model import ptdf_from_reactances

NYISO_ZONES = ("A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K")
NYISO_LINES = (("A", "B", 2600.0), ("B", "C", 2600.0), ("C", "E", 3600.0), ("D", "E", 2200.0),
               ("E", "F", 3200.0), ("E", "G", 2600.0), ("F", "G", 3600.0), ("G", "H", 5200.0),
               ("H", "I", 5200.0), ("I", "J", 4300.0), ("I", "K", 2000.0), ("J", "K", 1500.0))
NYISO_DC_ZONES = ("A", "C", "D", "J", "H")
# approximate zone centroids (lat, lon)
NYISO_COORDS = ((42.9, -78.8), (43.15, -77.6), (43.05, -76.15), (44.7, -73.45), (43.1, -75.2),
                (42.65, -73.75), (41.7, -73.9), (41.2, -73.8), (40.95, -73.85), (40.7, -74.0), (40.8, -73.2))
NYISO_PEAK = np.array([2700, 2100, 2900, 800, 1400, 2400, 2300, 700, 1500, 11000, 5300], dtype=float)
NYISO_CAP = np.array([4800, 1800, 6800, 2400, 1600, 4200, 3400, 2100, 400, 11500, 6000], dtype=float)
NYISO_COST = np.array([22, 25, 20, 18, 28, 35, 40, 30, 55, 60, 70], dtype=float)
NYISO_RES_SHARE = np.array([0.25, 0.1, 0.2, 0.15, 0.15, 0.05, 0.05, 0.0, 0.0, 0.02, 0.03])
# evening window 4-8 pm, multipliers of the zonal peak
LOAD_PROFILE = np.array([0.95, 0.98, 1.0, 0.97, 0.92])
COMPUTE_PROFILE = np.array([0.9, 0.95, 1.0, 1.0, 0.95])


@dataclass
class SyntheticSystem:
    grid: GridModel
    netdc: NetDCModel
    scenarios: list
    forecast: ScenarioRecord
    schema: FeatureSchema
    peak_load: float
    params: dict = None


def _ptdf_connected(n, lines, rng, retries=100):
    for _ in range(retries):
        x = rng.uniform(0.05, 0.15, len(lines))
        try:
            return ptdf_from_reactances(n, [(f, t) for f, t, _ in lines], x), x
        except ModelError:
            continue
    raise ModelError("could not draw a connected topology")


def _random_lines(n, rng, retries=100):
    for _ in range(retries):
        edges = set()
        for i in range(n):
            for j in range(i + 1, n):
                if rng.random() < min(1.0, 2.5 / max(n - 1, 1)):
                    edges.add((i, j))
        # connectivity check by union-find
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j in edges:
            parent[find(i)] = find(j)
        if len({find(i) for i in range(n)}) == 1 and edges:
            return sorted(edges)
    return [(i, i + 1) for i in range(n - 1)]


def _distance(coords, dc_idx, n_users):
    lat = np.radians([c[0] for c in coords])
    lon = np.radians([c[1] for c in coords])
    D = np.zeros((len(dc_idx), n_users))
    for a, i in enumerate(dc_idx):
        for j in range(n_users):
            x = (lon[j] - lon[i]) * np.cos(0.5 * (lat[i] + lat[j]))
            y = lat[j] - lat[i]
            D[a, j] = 6371.0 * np.hypot(x, y)
    return D / max(D.max(), 1e-12)


def _layout(n_zones, rng):
    """Zone names, lines, coordinates, peak loads, capacities, costs, renewable shares, DC zones."""
    if n_zones == 11:
        idx = {z: i for i, z in enumerate(NYISO_ZONES)}
        lines = [(idx[a], idx[b], c) for a, b, c in NYISO_LINES]
        return (NYISO_ZONES, lines, NYISO_COORDS, NYISO_PEAK.copy(), NYISO_CAP.copy(), NYISO_COST.copy(),
                NYISO_RES_SHARE.copy(), [idx[z] for z in NYISO_DC_ZONES])
    if n_zones == 3:
        return (("Z1", "Z2", "Z3"), [(0, 1, 200.0), (1, 2, 130.0)], ((43.0, -77.0), (42.0, -75.0), (41.0, -74.0)),
                np.array([50.0, 60.0, 200.0]), np.array([300.0, 100.0, 260.0]), np.array([20.0, 40.0, 80.0]),
                np.array([0.6, 0.4, 0.0]), [0, 2])
    names = tuple(f"Z{i + 1}" for i in range(n_zones))
    edges = _random_lines(n_zones, rng)
    peak = rng.uniform(100.0, 1000.0, n_zones)
    cap = peak * rng.uniform(0.5, 2.0, n_zones)
    cost = rng.uniform(15.0, 80.0, n_zones)
    total = peak.sum()
    lines = [(i, j, float(np.round(rng.uniform(0.15, 0.5) * total, 1))) for i, j in edges]
    coords = tuple((float(a), float(b)) for a, b in zip(rng.uniform(40, 45, n_zones), rng.uniform(-79, -72, n_zones)))
    share = rng.dirichlet(np.ones(n_zones))
    order = np.argsort(cost)
    return names, lines, coords, peak, cap, cost, share, sorted(order.tolist())


def generate_system(seed, n_zones=11, n_dc=5, penetration=0.2, n_scenarios=20, horizon=5, load_noise=0.05,
                    renewable_share=0.12, compute_unit=None, alpha=1.0):
    """Grid, data-center network and hourly scenarios for the given seed.

    ``penetration`` is the data-center share of the peak system load at the
    peak hour of the nominal profile.
    """
    if not 0 < penetration < 1:
        raise ModelError("penetration must lie in (0, 1)")
    if n_dc > n_zones or n_dc < 1:
        raise ModelError("need 1 <= n_dc <= n_zones")
    if not 1 <= horizon <= LOAD_PROFILE.size:
        raise ModelError(f"horizon must be between 1 and {LOAD_PROFILE.size}")
    rng = np.random.default_rng(seed)
    names, lines, coords, peak, cap, cost, share, dc_zones = _layout(n_zones, rng)
    dc_zones = list(dc_zones)[:n_dc]
    if len(dc_zones) < n_dc:
        rest = [z for z in range(n_zones) if z not in dc_zones]
        dc_zones += rest[:n_dc - len(dc_zones)]
    b = n_zones
    ptdf, _ = _ptdf_connected(b, lines, rng)
    quad = np.round(cost / np.maximum(cap, 1.0) * 0.15, 8)
    grid = GridModel(
        n_buses=b, lines=tuple(lines), ptdf=ptdf, gen_cost_lin=cost, gen_cost_quad=quad,
        gen_min=np.round(0.2 * cap, 6), gen_max=cap, ramp_up=np.round(0.35 * cap, 6),
        ramp_dn=np.round(0.35 * cap, 6), startup_ramp=np.round(0.4 * cap, 6), shutdown_ramp=np.round(0.4 * cap, 6),
        startup_cost=np.round(5.0 * cap, 6), shed_cost=np.full(b, 2000.0),
        redispatch_limit=np.round(0.25 * cap, 6), bus_names=names)

    profile = LOAD_PROFILE[:horizon] if horizon > 1 else LOAD_PROFILE[[2]]
    cprofile = COMPUTE_PROFILE[:horizon] if horizon > 1 else COMPUTE_PROFILE[[2]]
    peak_hour = int(np.argmax(profile))
    cprofile = cprofile / cprofile[peak_hour]
    sys_peak = float(peak.sum() * profile[peak_hour])
    unit = compute_unit if compute_unit is not None else (100.0 if b >= 11 else 10.0)
    m = b
    conv = np.zeros((b, n_dc))
    for i, z in enumerate(dc_zones):
        conv[z, i] = unit
    total_units = penetration * sys_peak / unit
    delta_peak = total_units * peak / peak.sum()
    dist = _distance(coords, dc_zones, m)
    netdc = NetDCModel(n_dc, m, np.round(dist, 10), conv, tuple(dc_zones), latency_loss_cap=alpha,
                       dc_names=tuple(f"DC-{names[z]}" for z in dc_zones))
    ren_cap = renewable_share * sys_peak * share

    forecast = ScenarioRecord(np.outer(profile, peak), np.outer(np.full(profile.size, 0.4), ren_cap),
                              np.outer(cprofile, delta_peak), name="nominal")
    scenarios = []
    for s in range(n_scenarios):
        level = rng.normal(1.0, 2.0 * load_noise)
        d = np.outer(profile, peak) * level * (1.0 + load_noise * rng.standard_normal((profile.size, b)))
        cf = np.clip(rng.uniform(0.1, 0.7) + 0.1 * rng.standard_normal(profile.size), 0.0, 1.0)
        w = np.outer(cf, ren_cap)
        dl = np.outer(cprofile, delta_peak) * (1.0 + load_noise * rng.standard_normal((profile.size, m)))
        scenarios.append(ScenarioRecord(np.maximum(d, 0.0), w, np.maximum(dl, 0.0), name=f"s{s:04d}"))
    schema = FeatureSchema.for_grid(b, len(lines))
    params = dict(seed=int(seed), n_zones=int(n_zones), n_dc=int(n_dc), penetration=float(penetration),
                  n_scenarios=int(n_scenarios), horizon=int(horizon), load_noise=float(load_noise),
                  renewable_share=float(renewable_share), compute_unit=float(unit), alpha=float(alpha))
    return SyntheticSystem(grid, netdc, scenarios, forecast, schema, sys_peak, params)


def toy_system(seed=0, penetration=0.2, n_scenarios=20, alpha=1.0, load_noise=0.08):
    """3-zone, 2-line, 2-data-center single-period system."""
    return generate_system(seed, n_zones=3, n_dc=2, penetration=penetration, n_scenarios=n_scenarios, horizon=1,
                           load_noise=load_noise, alpha=alpha)


def nyiso_system(seed=0, penetration=0.2, n_scenarios=20, alpha=1.0, horizon=5):
    return generate_system(seed, n_zones=11, n_dc=5, penetration=penetration, n_scenarios=n_scenarios,
                           horizon=horizon, alpha=alpha)


# ---------------------------------------------------------------------------
# real-time records
# ---------------------------------------------------------------------------
def make_records(system, n_records, seed=0, hour=None, rt_noise=0.05, r_bar=None):
    """Single-period records around a day-ahead plan.

    Each record draws a scenario, plans the hour with the non-coordinated
    commitment/dispatch on the scenario itself (the forecast), then perturbs
    loads, renewables and computing demand for the real-time realisation.
    Features come from the non-coordinated real-time dispatch.
    """
    rng = np.random.default_rng(seed)
    grid, netdc = system.grid, system.netdc
    out = []
    for i in range(n_records):
        scen = system.scenarios[int(rng.integers(len(system.scenarios)))]
        t = int(rng.integers(scen.horizon)) if hour is None else hour
        fc = scen.hour(t)
        alloc = latency_optimal_allocation(netdc, fc.compute_demand)
        uc = solve_uc(grid, fc.loads, fc.renewables, alloc.theta, netdc)
        d = fc.loads[0] * (1.0 + rt_noise * rng.standard_normal(grid.n_buses))
        w = fc.renewables[0] * np.clip(1.0 + 2.0 * rt_noise * rng.standard_normal(grid.n_buses), 0.0, None)
        dl = fc.compute_demand[0] * (1.0 + rt_noise * rng.standard_normal(netdc.n_users))
        rec = ScenarioRecord(np.maximum(d, 0.0)[None], w[None], np.maximum(dl, 0.0)[None],
                             day_ahead_dispatch=uc.p[0], commitment=np.round(uc.u[0]), name=f"r{i:04d}")
        out.append(with_features(rec, grid, netdc, system.schema, r_bar))
    return out


def with_features(record, grid, netdc, schema, r_bar=None):
    """Attach features (loads, prices, renewables, flows) from the non-coordinated dispatch."""
    alloc = latency_optimal_allocation(netdc, record.compute_demand)
    disp = dispatch_rt(grid, netdc, record, alloc.theta[0], r_bar=r_bar)
    if disp.lmp is None:
        raise ModelError(f"record {record.name}: non-coordinated dispatch failed ({disp.status})")
    x = features_assemble({"d": record.loads[0], "lam": disp.lmp, "r": record.renewables[0], "f": disp.flows},
                          schema)
    return record.replace(features=x)


# ---------------------------------------------------------------------------
# tiny random instances for oracle comparisons
# ---------------------------------------------------------------------------
def tiny_instance(seed, max_patterns=12):
    """Random (grid, netdc, topology, scenario) with b<=3, n<=2, m<=2, tau<=2.

    Sizes are redrawn until binaries + complementarity pairs <= ``max_patterns``,
    and whole draws are redrawn until the non-coordinated commitment is feasible
    (renewables cannot be spilled, so a must-run minimum can over-supply a bus).
    """
    rng = np.random.default_rng(seed)
    while True:
        inst = _tiny_draw(rng, max_patterns, seed)
        grid, netdc, _, scen = inst
        theta = latency_optimal_allocation(netdc, scen.compute_demand).theta
        try:
            solve_uc(grid, scen.loads, scen.renewables, theta, netdc)
        except ModelError:
            continue
        return inst


def _tiny_draw(rng, max_patterns, seed, sizes=None, line_scale=1.0):
    from .model import build_incidence

    while True:
        b = int(rng.integers(1, 4))
        n = int(rng.integers(1, 3))
        m = int(rng.integers(1, 3))
        tau = int(rng.integers(1, 3))
        if sizes is not None:
            b, n, m, tau = sizes
        n_gen = int(rng.integers(1, b + 1))
        if sizes is not None or n_gen * tau + tau * n * m + tau <= max_patterns:
            break
    gens = np.zeros(b, dtype=bool)
    gens[rng.choice(b, n_gen, replace=False)] = True
    cap = np.where(gens, rng.uniform(50, 150, b), 0.0)
    if b > 1:
        lines = [(i, i + 1, float(rng.uniform(20, 80)) * line_scale) for i in range(b - 1)]
        ptdf = ptdf_from_reactances(b, [(f, t) for f, t, _ in lines], rng.uniform(0.05, 0.15, b - 1))
    else:
        lines, ptdf = [], np.zeros((0, 1))
    grid = GridModel(b, tuple(lines), ptdf, np.where(gens, rng.uniform(10, 60, b), 0.0),
                     np.where(gens, rng.uniform(0.0, 0.05, b), 0.0),
                     np.round(np.where(gens, rng.uniform(0.0, 0.3, b), 0.0) * cap, 6), cap,
                     0.6 * cap, 0.6 * cap, 0.7 * cap, 0.7 * cap, np.where(gens, rng.uniform(0, 500, b), 0.0),
                     np.full(b, 1000.0), 0.3 * cap)
    dc_bus = rng.integers(0, b, n)
    conv = np.zeros((b, n))
    conv[dc_bus, np.arange(n)] = 10.0
    netdc = NetDCModel(n, m, rng.uniform(0.1, 1.0, (n, m)), conv, tuple(dc_bus.tolist()),
                       latency_loss_cap=float(rng.choice([0.0, 0.1, 0.5, 1.0])))
    loads = rng.uniform(0, 60, (tau, b)) * rng.uniform(0.5, 1.5, tau)[:, None]
    ren = rng.uniform(0, 10, (tau, b))
    dl = rng.uniform(0.5, 3.0, (tau, m))
    topo = build_incidence(n, tau)
    return grid, netdc, topo, ScenarioRecord(loads, ren, dl, name=f"tiny{seed}")


def tiny_training_instance(seed, max_patterns=9, q=None):
    """Random (grid, netdc, records) for joint-training oracle checks.

    Two data centers (one spatial link), b in {2, 3} buses, q <= 3 single-period
    records around one forecast.  The user count is chosen so that the joint
    problem has at most ``max_patterns`` complementarity pairs.
    """
    rng = np.random.default_rng([seed, 7])
    q = int(rng.integers(1, 4)) if q is None else int(q)
    m = 2 if q * (2 * 2 + 1) <= max_patterns else 1
    if q * (2 * m + 1) > max_patterns:
        raise ValueError(f"q={q} needs more than {max_patterns} patterns")
    b = int(rng.integers(2, 4))
    while True:
        grid, netdc, _, fc = _tiny_draw(rng, max_patterns, seed, (b, 2, m, 1), line_scale=0.4)
        # data centers at the two ends of the line graph so that a spatial shift moves power across it
        conv = np.zeros((b, 2))
        conv[0, 0] = conv[b - 1, 1] = 10.0
        netdc = NetDCModel(2, m, netdc.distance, conv, (0, b - 1),
                           latency_loss_cap=float(rng.choice([0.1, 0.5, 1.0])))
        schema = FeatureSchema.for_grid(b, len(grid.lines))
        try:
            alloc = latency_optimal_allocation(netdc, fc.compute_demand)
            uc = solve_uc(grid, fc.loads, fc.renewables, alloc.theta, netdc)
            recs = []
            for i in range(q):
                d = fc.loads[0] * (1.0 + 0.15 * rng.standard_normal(b))
                dl = fc.compute_demand[0] * (1.0 + 0.3 * rng.standard_normal(m))
                rec = ScenarioRecord(np.maximum(d, 0.0)[None], fc.renewables, np.maximum(dl, 0.05)[None],
                                     day_ahead_dispatch=uc.p[0], commitment=np.round(uc.u[0]),
                                     name=f"tiny{seed}r{i}")
                recs.append(with_features(rec, grid, netdc, schema))
        except ModelError:
            continue
        return grid, netdc, recs
