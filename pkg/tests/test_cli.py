import csv
import hashlib
import json

import pytest

from tsmdp_lab import cli
from tsmdp_lab.config import ExperimentConfig, load_config
from tsmdp_lab.errors import ConfigurationError, InfiniteConstantError, SimulationError


def small_two_state(tmp_path, **changes):
    cfg = load_config("two_state").replace(n_runs=2, horizons=[1000], **changes)
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    return str(path)


def test_bundled_configs_load():
    for name in ("queue", "two_server", "two_state"):
        cfg = load_config(name)
        assert ExperimentConfig.from_json(cfg.to_json()).digest() == cfg.digest()


def test_unknown_keys_rejected():
    doc = load_config("two_state").to_dict()
    doc["analysis"]["epsilonn"] = 0.2
    with pytest.raises(ConfigurationError, match="epsilonn"):
        ExperimentConfig.from_dict(doc)
    doc = load_config("queue").to_dict()
    doc["family_params"]["capacty"] = 3
    with pytest.raises(ConfigurationError, match="capacty"):
        ExperimentConfig.from_dict(doc)
    doc = load_config("queue").to_dict()
    del doc["version"]
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(doc)


def test_run_seeds():
    assert [cli.run_seed(7, i) for i in range(3)] == [7, 6, 5]


def test_solve_queue(tmp_path, capsys):
    assert cli.main(["solve", "--config", "queue", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "solve.json").read_text())
    assert report["gain"] == pytest.approx(96.4088, abs=5e-4)
    for name in ("policy.csv", "stationary.csv", "arrivals.csv", "manifest.json"):
        assert (tmp_path / name).exists()


def test_solve_without_grid(tmp_path):
    cfg = load_config("two_state").replace(grid_axes=None)
    report = cli.cmd_solve(cfg, tmp_path)
    assert report["policy"] == "11"


def test_simulate_file_contract_and_determinism(tmp_path):
    cfg = small_two_state(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--config", cfg, "--out", str(a)]) == 0
    assert cli.main(["simulate", "--config", cfg, "--out", str(b)]) == 0
    runs = sorted(p.relative_to(a) for p in (a / "runs").rglob("*.csv"))
    assert len(runs) == 4
    assert (a / "aggregate.csv").exists()
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    manifest = json.loads((a / "manifest.json").read_text())
    for rel, digest in manifest["files"].items():
        assert hashlib.sha256((a / rel).read_bytes()).hexdigest() == digest
    assert manifest["seeds"] == [cli.run_seed(manifest["config"]["seed"], i) for i in range(2)]


def test_thread_count_does_not_change_output(tmp_path, monkeypatch):
    cfg = small_two_state(tmp_path)
    monkeypatch.setenv("TSMDP_LAB_THREADS", "1")
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "one")])
    monkeypatch.setenv("TSMDP_LAB_THREADS", "4")
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "four")])
    assert (tmp_path / "one/aggregate.csv").read_bytes() == (tmp_path / "four/aggregate.csv").read_bytes()


def test_overrides(tmp_path):
    cfg = cli.apply_overrides(load_config("two_server"), runs=3, horizon=5000, seed=1)
    assert cfg.n_runs == 3 and cfg.horizon == 5000 and cfg.seed == 1
    assert max(cfg.checkpoints) == 5000


def test_analyze_two_server(tmp_path):
    report = cli.cmd_analyze(load_config("two_server"), tmp_path)
    rc = report["regret_constant"]
    assert rc["witness_violations"] == []
    assert report["theorem4"]["dominates"]
    assert rc["value"] <= report["theorem4"]["bound"]


def test_analyze_queue_partition(tmp_path):
    report = cli.cmd_analyze(load_config("queue"), tmp_path)
    with open(tmp_path / "regions.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 190
    used = {r["optimal_policy"] for r in rows}
    assert used <= set(report["policies"])
    assert not report["true_on_grid"]


def test_analyze_singleton_grid_rejected(tmp_path):
    cfg = load_config("two_state").replace(grid_axes=[[0.8], [0.2], [0.4], [0.6]])
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert cli.main(["analyze", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_concentration_default_paths(tmp_path, caplog):
    cfg = load_config("two_state").replace(
        concentration={"delta": 0.1, "holdout_paths": 200, "n_cycles": 200}
    )
    report = cli.cmd_concentration(cfg, tmp_path)
    assert report["calibration_paths"] == cli.DEFAULT_PATHS
    assert "n_paths not set" in caplog.text
    assert (tmp_path / "per_k.csv").exists()


def test_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1, "family": "queue", "true_parameter": [0.6, 0.3], "oops": 1}')
    assert cli.main(["solve", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["solve", "--config", "nope.json", "--out", str(tmp_path / "o")]) == 2

    def boom(*a, **k):
        raise InfiniteConstantError("unbounded")

    monkeypatch.setattr(cli.an, "regret_constant", boom)
    assert cli.main(["analyze", "--config", "two_server", "--out", str(tmp_path / "o")]) == 4

    def stuck(*a, **k):
        raise SimulationError("stuck")

    monkeypatch.setitem(cli.COMMANDS, "solve", stuck)
    assert cli.main(["solve", "--config", "queue", "--out", str(tmp_path / "o")]) == 3


def test_failed_runs_are_listed(tmp_path):
    cfg = load_config("two_state").replace(n_runs=2, horizons=[2000], cycle_cap=1)
    summary = cli.cmd_simulate(cfg, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["failures"]) == 2
    assert all(f["agent"] == "tsmdp" for f in manifest["failures"])
    assert "ucrl2_0.1" in summary["agents"]
