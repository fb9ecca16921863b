import csv
import json

import pytest

from conftest import small_config
from trustbench.cli import main
from trustbench.errors import ConfigurationError
from trustbench.experiment import (
    MANIFEST,
    NO_ANOMALOUS,
    OUT_ENV,
    PARTIAL_MARKER,
    ExperimentConfig,
    check_conservation,
    execute,
    run_experiment,
    sweep_bias,
    sweep_cost,
)


def test_config_validation_and_profiles():
    assert ExperimentConfig.full().n_workers * ExperimentConfig.full().sims_per_worker == 1152
    d = ExperimentConfig.desk()
    assert (d.n_workers, d.n_policies) == (48, 200)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(n_workers=4, sims_per_worker=1, n_policies=10)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(anomalous_fraction=1.5)
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"n_workrs": 3})
    assert ExperimentConfig.from_dict({"profile": "desk", "c": 2.0}).n_workers == 48
    assert ExperimentConfig.full().tolerance == pytest.approx(1.839, abs=1e-3)


def test_noiseless_honest_run():
    res = execute(small_config(sigma=0.0, anomalous_fraction=0.0, delta_val=0.05))
    assert all(r.valid for r in res.rounds)
    assert all(r.attempt == 0 for r in res.rounds)
    assert res.fabric.counts()["committed"] == res.n_tasks


def test_no_anomalous_marker():
    res = execute(small_config(anomalous_fraction=0.0))
    assert set(res.analysis.labels.values()) == {"honest"}
    assert all(r["status"] == NO_ANOMALOUS and r["p_value"] is None for r in res.analysis.ks_rows)
    assert res.analysis.metrics.miss_detection_pct is None


def test_conservation_and_capacity(small_run):
    assert check_conservation(small_run) == []
    cfg = small_run.cfg
    primary = [r for r in small_run.fabric.results if r.attempt == 0]
    assert len(primary) == cfg.n_policies * cfg.n_batches <= cfg.n_workers * cfg.sims_per_worker * cfg.n_batches
    assert small_run.ledger.verify().ok
    for p in small_run.profiles.values():
        assert abs(p.V) <= p.n and (p.V + p.n) % 2 == 0


def test_threaded_run_conserves():
    res = execute(small_config(c=10.0), deterministic=False)
    assert check_conservation(res) == []
    assert res.ledger.verify().ok
    claims = {}
    for r in res.fabric.results:
        claims[(r.task_id, r.attempt)] = claims.get((r.task_id, r.attempt), 0) + 1
    assert max(claims.values()) == 1


def test_replay_digest(tmp_path):
    cfg = small_config()
    a = run_experiment(cfg, output_dir=tmp_path / "a")
    b = run_experiment(cfg, output_dir=tmp_path / "b")
    c = run_experiment(cfg.replace(master_seed=1), output_dir=tmp_path / "c")
    assert a.digest == b.digest != c.digest
    assert (tmp_path / "a" / "chain.bin").read_bytes() == (tmp_path / "b" / "chain.bin").read_bytes()
    assert not (tmp_path / "a" / PARTIAL_MARKER).exists()
    for name in ("ks_table.csv", "detection.csv", "cost.csv", "ecdf_valid.csv", "ecdf_dev.csv", "features.csv", MANIFEST):
        assert (tmp_path / "a" / name).is_file()
    header = next(csv.reader(open(tmp_path / "a" / "ks_table.csv")))
    assert header[:4] == ["quantity", "c", "ks_stat", "p_value"]


def test_env_overrides_output(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    out = run_experiment(small_config(n_batches=1))
    assert out.output_dir == tmp_path / "env"


def test_partial_marker_on_failure(tmp_path, monkeypatch):
    import trustbench.experiment as ex

    def boom(*a, **k):
        raise RuntimeError("executor failed")

    monkeypatch.setattr(ex, "execute", boom)
    with pytest.raises(RuntimeError):
        run_experiment(small_config(), output_dir=tmp_path)
    assert "aborted" in (tmp_path / PARTIAL_MARKER).read_text()


def test_sweep_shapes(tmp_path):
    curve = sweep_bias(small_config(n_batches=1), [0], n_seeds=1, output_dir=tmp_path)
    assert len(curve) == 1 and curve[0]["c"] == 0.0
    rows = list(csv.reader(open(tmp_path / "detection.csv")))
    assert rows[0] == ["c", "FA%", "MD%"] and len(rows) == 2
    cost = sweep_cost(small_config(n_batches=1), [1.0, 100.0], [2], n_seeds=2)
    assert [r["delta_val"] for r in cost] == [1.0, 100.0]
    assert cost[1]["avg_recomputes"] == 2.0
    assert cost[1]["avg_bits_per_sim_per_endorser_per_dim"] == 4.0


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(small_config(n_batches=2).to_dict()))
    assert main(["run", "--config", str(cfg_path), "--deterministic", "--out", str(root / "a")]) == 0
    assert main(["run", "--config", str(cfg_path), "--deterministic", "--out", str(root / "b")]) == 0
    assert main(["run", "--config", str(cfg_path), "--deterministic", "--master-seed", "9", "--out", str(root / "c")]) == 0
    return root


def test_cli_verify_ledger(cli_run, tmp_path, capsys):
    chain = cli_run / "a" / "chain.bin"
    assert main(["verify-ledger", str(chain)]) == 0
    head = json.loads((cli_run / "a" / MANIFEST).read_text())["head_hash"]
    assert capsys.readouterr().out.strip() == f"ok {head}"
    data = bytearray(chain.read_bytes())
    data[len(data) // 2] ^= 0x10
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(data))
    assert main(["verify-ledger", str(bad)]) == 2
    out = capsys.readouterr().out
    assert out.startswith("broken ")
    assert int(out.split()[1]) >= 1


def test_cli_replay_and_detect(cli_run, capsys):
    assert main(["replay-check", str(cli_run / "a"), str(cli_run / "b")]) == 0
    assert main(["replay-check", str(cli_run / "a"), str(cli_run / "c")]) == 2
    assert main(["detect", str(cli_run / "a")]) == 0
    out = capsys.readouterr().out
    stored = next(csv.DictReader(open(cli_run / "a" / "detection.csv")))
    assert f"false_alarm_pct={float(stored['false_alarm_pct'])}" in out
    assert (cli_run / "a" / "detect" / "ks_table.csv").read_text() == (cli_run / "a" / "ks_table.csv").read_text()


def test_cli_error_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["run", "--profile", "huge"]) == 1
    assert main(["verify-ledger", str(tmp_path / "missing.bin")]) == 1
    (tmp_path / "profiles.json").write_text(json.dumps({"config": {}}))
    assert main(["detect", str(tmp_path)]) == 3
    capsys.readouterr()
