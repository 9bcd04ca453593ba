import numpy as np
import pytest

from dccoord.bilevel import dc_injection, solve_uc
from dccoord.fileio import save_scenarios, save_system
from dccoord.lower import latency_optimal_allocation
from dccoord.model import ModelError
from dccoord.synth import generate_system, make_records, nyiso_system, tiny_instance, tiny_training_instance


def _bytes(tmp_path, tag, s):
    d = tmp_path / tag
    d.mkdir(exist_ok=True)
    save_scenarios(d / "sc.csv", s.scenarios)
    save_system(d / "sys.yaml", s.grid, s.netdc, 1, s.params, "sc.csv")
    return (d / "sys.yaml").read_bytes() + (d / "sc.csv").read_bytes()


def test_seeded_generation_is_byte_identical(tmp_path):
    a = generate_system(5, n_zones=6, n_dc=3, n_scenarios=5, horizon=1)
    b = generate_system(5, n_zones=6, n_dc=3, n_scenarios=5, horizon=1)
    c = generate_system(6, n_zones=6, n_dc=3, n_scenarios=5, horizon=1)
    assert _bytes(tmp_path, "a", a) == _bytes(tmp_path, "b", b)
    assert _bytes(tmp_path, "a", a) != _bytes(tmp_path, "c", c)


@pytest.mark.parametrize("pen", [0.05, 0.2, 0.3])
def test_penetration_at_peak_hour(pen):
    s = generate_system(1, n_zones=8, n_dc=3, penetration=pen, n_scenarios=2, horizon=5)
    fc = s.forecast
    t = int(np.argmax(fc.loads.sum(axis=1)))
    theta = latency_optimal_allocation(s.netdc, fc.compute_demand).theta
    dc = dc_injection(s.netdc, theta)[t].sum()
    assert abs(dc - pen * fc.loads[t].sum()) <= 0.01 * pen * fc.loads[t].sum()


def test_nyiso_shape():
    s = nyiso_system(0, n_scenarios=2)
    assert s.grid.n_buses == 11 and s.netdc.n_dc == 5
    conv = s.netdc.conversion
    assert np.all((conv != 0).sum(axis=0) == 1)
    assert len(set(s.netdc.dc_bus)) == 5
    assert s.scenarios[0].horizon == 5
    assert s.schema.size == 3 * 11 + s.grid.n_lines


def test_bad_arguments():
    with pytest.raises(ModelError):
        generate_system(0, n_zones=3, n_dc=4)
    with pytest.raises(ModelError):
        generate_system(0, penetration=1.0)


def test_records_carry_plan_and_features():
    s = generate_system(2, n_zones=4, n_dc=2, n_scenarios=3, horizon=1)
    recs = make_records(s, 4, seed=0)
    assert len({r.name for r in recs}) == 4
    for r in recs:
        assert r.horizon == 1 and r.features.size == s.schema.size
        assert r.day_ahead_dispatch.size == 4 and set(np.unique(r.commitment)) <= {0.0, 1.0}
    again = make_records(s, 4, seed=0)
    assert all(np.array_equal(a.features, b.features) for a, b in zip(recs, again))


def test_tiny_instances_respect_bounds_and_are_feasible():
    for seed in range(30):
        grid, netdc, topo, scen = tiny_instance(seed)
        assert grid.n_buses <= 3 and netdc.n_dc <= 2 and netdc.n_users <= 2 and scen.horizon <= 2
        theta = latency_optimal_allocation(netdc, scen.compute_demand).theta
        solve_uc(grid, scen.loads, scen.renewables, theta, netdc)
    for seed in range(10):
        grid, netdc, recs = tiny_training_instance(seed)
        assert 1 <= len(recs) <= 3 and netdc.n_dc == 2
        assert len(recs) * (2 * netdc.n_users + 1) <= 9
