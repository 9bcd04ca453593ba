import os

import pytest

from dccoord.cli import EXIT_CONFIG, EXIT_IO, EXIT_LIMIT, EXIT_OK, main


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--preset", "toy", "--scenarios", "4", "--records", "10", "-o", str(d)]) == EXIT_OK
    return d


def test_generate_writes_versioned_files(toy_dir):
    for name, head in (("system.yaml", "format: dccoord-system"), ("scenarios.csv", "# dccoord-scenarios v1"),
                       ("records.csv", "# dccoord-records v1")):
        text = (toy_dir / name).read_text()
        assert head in text.splitlines()[0] or text.startswith(head)


def test_train_evaluate_sweep(toy_dir, tmp_path):
    sys_, rec = str(toy_dir / "system.yaml"), str(toy_dir / "records.csv")
    pol = str(tmp_path / "p.json")
    base = ["--system", sys_, "--records", rec, "--q", "6"]
    assert main(["train", *base, "--eps", "2", "--policy", pol, "-o", str(tmp_path)]) == EXIT_OK
    assert os.path.exists(pol)
    assert main(["evaluate", *base, "--policy", pol, "-o", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "evaluation.csv").read_text().startswith("# dccoord-report v1")
    assert main(["sweep", *base, "--eps", "0", "1", "-o", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "epsilon_sweep.csv").exists()


def test_output_root_from_environment(toy_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("DCCOORD_OUTPUT", str(tmp_path / "envroot"))
    rc = main(["train", "--system", str(toy_dir / "system.yaml"), "--records", str(toy_dir / "records.csv"),
               "--eps", "1", "--method", "base"])
    assert rc == EXIT_OK
    assert (tmp_path / "envroot" / "policy.json").exists()


def test_solve_da_with_trace(toy_dir, tmp_path):
    trace = tmp_path / "trace.txt"
    assert main(["solve-da", "--system", str(toy_dir / "system.yaml"), "--trace", str(trace),
                 "-o", str(tmp_path)]) == EXIT_OK
    assert trace.read_text().count("depth=") >= 1


def test_exit_codes(toy_dir, tmp_path):
    assert main(["solve-da", "--system", str(tmp_path / "missing.yaml")]) == EXIT_IO
    bad = tmp_path / "bad.yaml"
    bad.write_text((toy_dir / "system.yaml").read_text().replace("shed_cost:", "shed_cst:"))
    assert main(["solve-da", "--system", str(bad), "-o", str(tmp_path)]) == EXIT_CONFIG
    rc = main(["train", "--system", str(toy_dir / "system.yaml"), "--records", str(toy_dir / "records.csv"),
               "--eps", "2", "--node-limit", "0", "-o", str(tmp_path)])
    assert rc == EXIT_LIMIT
    with pytest.raises(SystemExit) as ei:
        main(["train", "--bogus"])
    assert ei.value.code == EXIT_CONFIG


def test_report_command(toy_dir, tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(f"format: dccoord-experiment\nversion: 1\nkind: day_ahead\nsystem: {toy_dir / 'system.yaml'}\n"
                   "alphas: [0, 1]\noptions: {n_records: 2}\n")
    assert main(["report", "--config", str(cfg), "-o", str(tmp_path / "rep")]) == EXIT_OK
    assert (tmp_path / "rep" / "day_ahead_summary.json").exists()
