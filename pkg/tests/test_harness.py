import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from civrep import estimators as E
from civrep import harness as H
from civrep import model as M
from civrep.data import SynthConfig, generate_synthetic, write_csv, write_schema
from civrep.errors import ConfigError, MetricUnavailableError, NumericError, ShapeError

from oracles import fold_audit

SMOKE = {
    "n": 300, "replications": 2, "base_seed": 7,
    "model": {"hidden": [16, 16], "epochs": 3, "batch_size": 64},
    "two_stage": {"hidden": [16, 16], "stage1_epochs": 3, "stage2_epochs": 3, "batch_size": 64},
}


def smoke_cfg(**over):
    return H.ExperimentConfig.from_dict({**SMOKE, **over})


# ---- metrics

def test_ace_error_examples():
    assert H.metric_ace_error(2.5, 2.0) == 0.5
    assert H.metric_ace_error(2.0, 2.0) == 0.0


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_ace_error_symmetric_nonnegative(a, b):
    assert H.metric_ace_error(a, b) == H.metric_ace_error(b, a) >= 0


def test_pehe_hand_computed():
    # realised effects (1, 2, 3), predictions (1, 1, 1): sqrt((0 + 1 + 4) / 3)
    assert H.metric_pehe([1.0, 1.0, 1.0], [2.0, 3.0, 4.0], [1.0, 1.0, 1.0]) == math.sqrt(5 / 3)
    assert H.metric_pehe([1.0, 2.0, 3.0], [2.0, 3.0, 4.0], [1.0, 1.0, 1.0]) == 0.0


def test_pehe_homogeneous_noiseless_effect_is_zero():
    y0 = np.array([0.5, -1.0, 2.0])
    assert H.metric_pehe(np.full(3, 2.0), y0 + 2.0, y0) == 0.0


def test_pehe_errors():
    with pytest.raises(MetricUnavailableError):
        H.metric_pehe([1.0], None, None)
    with pytest.raises(ShapeError):
        H.metric_pehe([1.0, 2.0], [1.0], [0.0])


def test_pehe_noise_floor_for_perfect_constant_predictor():
    # independent unit-variance arm noises give Var(y1 - y0) = 2
    ds = generate_synthetic(SynthConfig(n=50_000, seed=3))
    assert abs(H.metric_pehe(np.full(ds.n, 2.0), ds.y1, ds.y0) - math.sqrt(2)) < 0.02


# ---- configuration

def test_config_validation():
    with pytest.raises(ConfigError, match="unknown"):
        H.ExperimentConfig.from_dict({"reps": 3})
    with pytest.raises(ConfigError):
        H.ExperimentConfig.from_dict({"replications": 0})
    with pytest.raises(ConfigError):
        H.ExperimentConfig.from_dict({"data": "x.csv", "schema": "s.json"})  # generator still set
    with pytest.raises(ConfigError):
        H.ExperimentConfig.from_dict({"estimators": ["bart"]})
    with pytest.raises(ConfigError, match="unknown model"):
        H.ExperimentConfig.from_dict({"model": {"depth": 3}})


def test_config_load_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed"):
        H.ExperimentConfig.load(p)
    with pytest.raises(ConfigError):
        H.ExperimentConfig.load(tmp_path / "missing.json")


def test_config_missing_data_file_detected_at_start(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"generator": None, "data": "nope.csv", "schema": "nope.json"}))
    cfg = H.ExperimentConfig.load(p)
    assert cfg.data == str(tmp_path / "nope.csv")
    with pytest.raises(ConfigError, match="not found"):
        H.run_experiment(cfg, tmp_path / "out")


def test_config_hash_ignores_execution_settings():
    a = smoke_cfg()
    assert a.config_hash() == smoke_cfg(workers=3, output_dir="elsewhere").config_hash()
    assert a.config_hash() != smoke_cfg(base_seed=8).config_hash()
    assert H.ExperimentConfig.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_output_dir_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv(H.OUTPUT_DIR_ENV, str(tmp_path / "env"))
    cfg = smoke_cfg(replications=1, estimators=["naive"])
    H.run_experiment(cfg)
    assert (tmp_path / "env" / "report.json").is_file()


# ---- experiments

@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    return H.run_experiment(smoke_cfg(), out), out


def test_report_schema_and_self_consistency(smoke_run):
    report, out = smoke_run
    H.validate_report(report)
    assert report["schema_version"] == H.SCHEMA_VERSION
    assert len(report["replications"]) == 2 * 3 * 2
    assert json.loads((out / "report.json").read_text()) == report
    for key, agg in report["aggregates"].items():
        est, fold = key.split("/")
        vals = [r["ace_error"] for r in report["replications"] if r["estimator"] == est and r["fold"] == fold]
        assert agg["ace_error"]["mean"] == float(np.mean(vals))
        assert agg["ace_error"]["std"] == float(np.std(vals, ddof=1))


def test_report_csv_matches_rows(smoke_run):
    report, out = smoke_run
    lines = (out / "replications.csv").read_text().strip().splitlines()
    assert lines[0].split(",") == list(H.REPORT_COLUMNS)
    assert len(lines) == 1 + len(report["replications"])
    first = lines[1].split(",")
    assert float(first[4]) == report["replications"][0]["ace"]


def test_checkpoints_and_timings_written(smoke_run):
    report, out = smoke_run
    for rel in report["artifacts"]["checkpoints"]:
        M.load_checkpoint(out / rel)
    timings = json.loads((out / "timings.json").read_text())
    assert set(timings["replications"]) == {"0", "1"}


def test_repeated_runs_byte_identical(smoke_run, tmp_path):
    _, out = smoke_run
    H.run_experiment(smoke_cfg(), tmp_path)
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()
    assert (tmp_path / "replications.csv").read_bytes() == (out / "replications.csv").read_bytes()


def test_process_workers_match_serial(smoke_run, tmp_path):
    _, out = smoke_run
    H.run_experiment(smoke_cfg(workers=2), tmp_path)
    parallel, serial = (json.loads((d / "report.json").read_text()) for d in (tmp_path, out))
    assert parallel["config"].pop("workers") == 2
    serial["config"].pop("workers")
    assert parallel == serial


def test_replication_seeds(smoke_run):
    report, _ = smoke_run
    assert {(r["replication"], r["seed"]) for r in report["replications"]} == {(0, 7), (1, 8)}


def test_validate_report_catches_tampering(smoke_run):
    report, _ = smoke_run
    bad = json.loads(json.dumps(report))
    bad["replications"][0]["ace_error"] += 1.0
    with pytest.raises(ShapeError):
        H.validate_report(bad)


def test_failed_replication_recorded_and_excluded(tmp_path, monkeypatch, caplog):
    real = E.fit_naive

    def flaky(ds):
        if ds.meta["seed"] == 8:
            raise NumericError("synthetic failure")
        return real(ds)

    monkeypatch.setattr(E, "fit_naive", flaky)
    with caplog.at_level(logging.WARNING):
        report = H.run_experiment(smoke_cfg(estimators=["naive"]), tmp_path)
    assert report["failures"] == [{"replication": 1, "type": "NumericError",
                                   "message": "synthetic failure", "exit_code": 3}]
    assert {r["replication"] for r in report["replications"]} == {0}
    assert report["aggregates"]["naive/out"]["ace_error"]["n"] == 1
    assert "replication 1 failed" in caplog.text


def test_fold_index_audit(tmp_path, monkeypatch):
    """Every fitting routine sees training rows only."""
    leaks, fits = fold_audit(smoke_cfg(), tmp_path, monkeypatch)
    assert fits == 2 * 4  # per replication: model, dvae stage fit, naive, oracle stage fit
    assert leaks == []


def test_fold_audit_detects_leak(tmp_path, monkeypatch):
    # a broken split whose training fold contains the test rows
    monkeypatch.setattr(H, "split", lambda ds, frac, seed: (ds, ds.subset(range(ds.n // 2))))
    leaks, _ = fold_audit(smoke_cfg(estimators=["naive"]), tmp_path, monkeypatch)
    assert leaks


def test_csv_experiment(tmp_path):
    ds = generate_synthetic(SynthConfig(n=240, seed=1))
    write_schema(write_csv(ds, tmp_path / "d.csv"), tmp_path / "d.schema.json")
    cfg = H.ExperimentConfig.from_dict({**SMOKE, "generator": None, "data": str(tmp_path / "d.csv"),
                                        "schema": str(tmp_path / "d.schema.json"), "replications": 1})
    report = H.run_experiment(cfg, tmp_path / "out")
    assert not report["failures"]
    truth = float(np.mean(ds.y1 - ds.y0))
    row = report["replications"][0]
    assert row["ace_error"] == pytest.approx(abs(row["ace"] - truth), abs=1e-12)
