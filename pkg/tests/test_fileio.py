import json

import numpy as np
import pytest

from dccoord.fileio import (ConfigError, ExperimentConfig, load_experiment, load_policy, load_records,
                            load_scenarios, load_system, save_experiment, save_policy, save_records, save_scenarios,
                            save_system)
from dccoord.model import FeatureSchema, PolicySpec
from dccoord.synth import make_records, toy_system


@pytest.fixture(scope="module")
def toy():
    return toy_system(3, n_scenarios=4)


def test_system_roundtrip_is_exact(tmp_path, toy):
    save_scenarios(tmp_path / "sc.csv", toy.scenarios)
    save_system(tmp_path / "sys.yaml", toy.grid, toy.netdc, 1, toy.params, "sc.csv")
    sf = load_system(str(tmp_path / "sys.yaml"))
    np.testing.assert_array_equal(sf.grid.ptdf, toy.grid.ptdf)
    np.testing.assert_array_equal(sf.grid.gen_cost_quad, toy.grid.gen_cost_quad)
    np.testing.assert_array_equal(sf.netdc.distance, toy.netdc.distance)
    assert sf.grid.lines == toy.grid.lines
    assert sf.generator["seed"] == 3
    for a, b in zip(sf.scenarios, toy.scenarios):
        np.testing.assert_array_equal(a.loads, b.loads)
        np.testing.assert_array_equal(a.compute_demand, b.compute_demand)
    # writing again gives identical bytes
    save_system(tmp_path / "sys2.yaml", sf.grid, sf.netdc, 1, sf.generator, "sc.csv")
    assert (tmp_path / "sys.yaml").read_bytes() == (tmp_path / "sys2.yaml").read_bytes()


def test_records_roundtrip(tmp_path, toy):
    recs = make_records(toy, 3, seed=2)
    save_records(tmp_path / "r.csv", recs)
    back = load_records(str(tmp_path / "r.csv"), toy.grid.n_buses, toy.netdc.n_users)
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.day_ahead_dispatch, b.day_ahead_dispatch)
        np.testing.assert_array_equal(a.commitment, b.commitment)
        assert a.name == b.name


def test_csv_header_is_checked(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("scenario,hour\n0,0\n")
    with pytest.raises(ConfigError):
        load_scenarios(str(p))


def test_unknown_key_reports_line(tmp_path, toy):
    save_system(tmp_path / "s.yaml", toy.grid, toy.netdc)
    text = (tmp_path / "s.yaml").read_text().replace("shed_cost:", "shed_cst:")
    (tmp_path / "s.yaml").write_text(text)
    with pytest.raises(ConfigError) as ei:
        load_system(str(tmp_path / "s.yaml"))
    line = next(i for i, ln in enumerate(text.splitlines(), 1) if "shed_cst" in ln)
    assert f"s.yaml:{line}:" in str(ei.value) and "unknown key" in str(ei.value)


def test_policy_roundtrip_and_hash(tmp_path):
    schema = FeatureSchema.for_grid(3, 2)
    spec = PolicySpec([0.1, -0.2], np.arange(22.0).reshape(2, 11) / 7, 12.5, np.linspace(0, 1, 11),
                      np.linspace(1, 2, 11), False, schema)
    save_policy(tmp_path / "p.json", spec)
    back = load_policy(str(tmp_path / "p.json"))
    np.testing.assert_array_equal(back.weights, spec.weights)
    np.testing.assert_array_equal(back.feature_scale, spec.feature_scale)
    assert back.l1_includes_intercept is False and back.schema == schema
    d = json.loads((tmp_path / "p.json").read_text())
    d["schema"][1][1] = 4
    (tmp_path / "p.json").write_text(json.dumps(d))
    with pytest.raises(ConfigError, match="schema_hash"):
        load_policy(str(tmp_path / "p.json"))


def _exp(tmp_path, body):
    (tmp_path / "sys.yaml").write_text("")
    p = tmp_path / "exp.yaml"
    p.write_text("format: dccoord-experiment\nversion: 1\nsystem: sys.yaml\n" + body)
    return str(p)


def test_experiment_validation(tmp_path):
    cfg = load_experiment(_exp(tmp_path, "kind: day_ahead\nalphas: [0, 0.5]\n"))
    assert cfg.alphas == [0, 0.5] and cfg.system.endswith("sys.yaml")
    with pytest.raises(ConfigError, match="exp.yaml:5: alphas"):
        load_experiment(_exp(tmp_path, "kind: day_ahead\nalphas: []\n"))
    with pytest.raises(ConfigError, match="penetrations"):
        load_experiment(_exp(tmp_path, "kind: day_ahead\nalphas: [1]\npenetrations: [1.0]\n"))
    with pytest.raises(ConfigError, match="kind"):
        load_experiment(_exp(tmp_path, "kind: nonsense\nalphas: [1]\n"))
    with pytest.raises(ConfigError, match="qs"):
        load_experiment(_exp(tmp_path, "kind: feasibility_vs_q\nalphas: [1]\nqs: [80]\noptions: {n_records: 60}\n"))


def test_experiment_roundtrip(tmp_path):
    (tmp_path / "sys.yaml").write_text("")
    cfg = ExperimentConfig(str(tmp_path / "sys.yaml"), "epsilon_sweep", [1.0], [0.1, 0.2], [5], [0.0, 2.0], seed=4,
                           n_records=20)
    save_experiment(tmp_path / "e.yaml", cfg)
    back = load_experiment(str(tmp_path / "e.yaml"))
    assert back.digest() == cfg.digest()
