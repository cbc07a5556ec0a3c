"""Replicated experiments: data, folds, model training, estimators, metrics, reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import estimators as E
from . import model as M
from .data import Dataset, SynthConfig, generate_synthetic, load_csv, read_schema, split
from .errors import CivrepError, ConfigError, MetricUnavailableError, ShapeError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "CIVREP_OUTPUT_DIR"
ESTIMATORS = ("dvae_civ", "naive", "oracle")
FOLDS = ("within", "out")


# --------------------------------------------------------------------------
# metrics

def metric_ace_error(estimated: float, truth: float) -> float:
    """Absolute error of an average effect."""
    return abs(float(truth) - float(estimated))


def metric_pehe(cace_hat, y1, y0) -> float:
    """Root mean squared difference between realised and predicted individual effects."""
    if y1 is None or y0 is None:
        raise MetricUnavailableError("PEHE needs both potential outcomes (unavailable on real data)")
    cace_hat, y1, y0 = (np.asarray(a, dtype=np.float64).ravel() for a in (cace_hat, y1, y0))
    if not len(cace_hat) == len(y1) == len(y0):
        raise ShapeError(f"length mismatch: {len(cace_hat)}, {len(y1)}, {len(y0)}")
    return float(np.sqrt(np.mean(((y1 - y0) - cace_hat) ** 2)))


# --------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    generator: str | None = "synthetic"
    data: str | None = None
    schema: str | None = None
    n: int = 2000
    replications: int = 10
    train_frac: float = 0.7
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    two_stage: E.TwoStageConfig = field(default_factory=E.TwoStageConfig)
    estimators: tuple = ESTIMATORS
    base_seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    save_checkpoints: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = M.ModelConfig.from_dict(self.model)
        if isinstance(self.two_stage, dict):
            self.two_stage = E.TwoStageConfig.from_dict(self.two_stage)
        self.estimators = tuple(self.estimators)
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown or not self.estimators:
            raise ConfigError(f"estimators must be a non-empty subset of {ESTIMATORS}, got {self.estimators}")
        if (self.generator is None) == (self.data is None):
            raise ConfigError("set exactly one of 'generator' or 'data'")
        if self.generator is not None and self.generator != "synthetic":
            raise ConfigError(f"unknown generator {self.generator!r}")
        if self.data is not None and self.schema is None:
            raise ConfigError("'data' needs a 'schema' file")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
        cfg = cls.from_dict(d)
        base = Path(path).parent
        for key in ("data", "schema"):  # relative file paths resolve against the config's folder
            value = getattr(cfg, key)
            if value is not None and not Path(value).is_absolute():
                setattr(cfg, key, str(base / value))
        return cfg

    def to_dict(self) -> dict:
        return {
            "generator": self.generator, "data": self.data, "schema": self.schema, "n": self.n,
            "replications": self.replications, "train_frac": self.train_frac,
            "model": self.model.to_dict(),
            "two_stage": {**self.two_stage.__dict__, "hidden": list(self.two_stage.hidden)},
            "estimators": list(self.estimators), "base_seed": self.base_seed,
            "output_dir": self.output_dir, "workers": self.workers,
            "save_checkpoints": self.save_checkpoints,
        }

    def config_hash(self) -> str:
        """Hash of everything that influences results (workers and paths excluded)."""
        d = self.to_dict()
        for key in ("output_dir", "workers", "save_checkpoints"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def check_files(self) -> None:
        for key in ("data", "schema"):
            value = getattr(self, key)
            if value is not None and not Path(value).is_file():
                raise ConfigError(f"{key} file not found: {value}")


# --------------------------------------------------------------------------
# one replication

def load_data(cfg: ExperimentConfig, seed: int) -> Dataset:
    if cfg.generator == "synthetic":
        return generate_synthetic(SynthConfig(n=cfg.n, seed=seed))
    return load_csv(cfg.data, read_schema(cfg.schema))


def true_ace(ds: Dataset) -> float | None:
    """Known average effect: the generator's fixed value, else the sample mean of
    y1 - y0 when potential outcomes exist, else None."""
    if "true_ace" in ds.meta:
        return float(ds.meta["true_ace"])
    if ds.has_potential_outcomes:
        return float(np.mean(ds.y1 - ds.y0))
    return None


def fold_metrics(est: E.EffectEstimate, fold: Dataset, truth: float | None) -> dict:
    row = {"ace": est.ace, "ace_error": None, "pehe": None}
    if truth is not None:
        row["ace_error"] = metric_ace_error(est.ace, truth)
    if fold.has_potential_outcomes:
        row["pehe"] = metric_pehe(est.cace, fold.y1, fold.y0)
    return row


def fit_estimators(train: Dataset, names, model_params, ts_cfg: E.TwoStageConfig) -> dict:
    """Fit each named estimator on ``train``; return name -> predictor(Dataset) -> EffectEstimate."""
    out = {}
    if "dvae_civ" in names:
        s, z = M.extract_representations(model_params, train.x)
        ts = E.fit_two_stage(s, z, train.w, train.y, ts_cfg)
        out["dvae_civ"] = lambda d: E.two_stage_estimate(
            ts, M.extract_representations(model_params, d.x)[1], "dvae_civ")
    if "naive" in names:
        naive = E.fit_naive(train)
        out["naive"] = naive.estimate
    if "oracle" in names:
        oracle = E.fit_oracle(train, ts_cfg)
        out["oracle"] = lambda d: E.two_stage_estimate(oracle, E.oracle_zrep(d), "oracle")
    return out


def run_replication(cfg: ExperimentConfig, r: int, out_dir: Path | None = None) -> dict:
    """Everything for replication ``r``; returns its rows, fold indices and timings."""
    seed = cfg.base_seed + r
    t0 = time.perf_counter()
    ds = load_data(cfg, seed)
    train, test = split(ds, cfg.train_frac, seed)
    truth = true_ace(ds)
    timings = {}
    params = None
    if "dvae_civ" in cfg.estimators:
        t = time.perf_counter()
        params, hist = M.train(train, replace(cfg.model, seed=seed))
        timings["dvae_train"] = time.perf_counter() - t
        if out_dir is not None and cfg.save_checkpoints:
            (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            M.save_checkpoint(params, out_dir / "checkpoints" / f"rep_{r:03d}.npz")
    t = time.perf_counter()
    fitted = fit_estimators(train, cfg.estimators, params, replace(cfg.two_stage, seed=seed))
    timings["estimators"] = time.perf_counter() - t
    rows = []
    for name in cfg.estimators:
        for fold_name, fold in zip(FOLDS, (train, test)):
            rows.append({"replication": r, "seed": seed, "estimator": name, "fold": fold_name,
                         **fold_metrics(fitted[name](fold), fold, truth)})
    timings["total"] = time.perf_counter() - t0
    return {"replication": r, "rows": rows, "timings": timings,
            "folds": {"train": train.index.tolist(), "test": test.index.tolist()}}


def _run_captured(cfg: ExperimentConfig, r: int, out_dir: Path | None) -> dict:
    try:
        return run_replication(cfg, r, out_dir)
    except (CivrepError, FloatingPointError) as exc:
        return {"replication": r, "error": {"type": type(exc).__name__, "message": str(exc),
                                            "exit_code": getattr(exc, "exit_code", 3)}}


# --------------------------------------------------------------------------
# aggregation and persistence

def _summary(values: list) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(vals)),
            "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else None, "n": len(vals)}


def aggregate(rows: list[dict]) -> dict:
    """Mean and sample std (n - 1) per estimator, fold and metric."""
    out = {}
    for row in rows:
        key = f"{row['estimator']}/{row['fold']}"
        out.setdefault(key, {"ace": [], "ace_error": [], "pehe": []})
        for metric in ("ace", "ace_error", "pehe"):
            out[key][metric].append(row[metric])
    return {key: {m: _summary(v) for m, v in metrics.items()} for key, metrics in sorted(out.items())}


REPORT_COLUMNS = ("replication", "seed", "estimator", "fold", "ace", "ace_error", "pehe")


def write_rows_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        out.writeheader()
        for row in rows:
            out.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                          for k in REPORT_COLUMNS})


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run all replications and write ``report.json``, ``replications.csv``,
    ``folds.json`` and ``timings.json`` into the output directory.

    The report holds only deterministic content; wall-clock timings live in
    ``timings.json`` so repeated runs produce byte-identical reports.
    """
    cfg.check_files()
    out_dir = Path(out_dir) if out_dir is not None else cfg.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    if cfg.workers > 1 and cfg.replications > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_captured, [cfg] * cfg.replications,
                                    range(cfg.replications), [out_dir] * cfg.replications))
    else:
        results = [_run_captured(cfg, r, out_dir) for r in range(cfg.replications)]
    results.sort(key=lambda res: res["replication"])
    failures = [{"replication": res["replication"], **res["error"]} for res in results if "error" in res]
    done = [res for res in results if "error" not in res]
    for f in failures:
        log.warning("replication %d failed and is excluded from aggregates: %s: %s",
                    f["replication"], f["type"], f["message"])
    rows = [row for res in done for row in res["rows"]]
    artifacts = {"report": "report.json", "rows": "replications.csv", "folds": "folds.json",
                 "timings": "timings.json"}
    if cfg.save_checkpoints and "dvae_civ" in cfg.estimators:
        artifacts["checkpoints"] = [f"checkpoints/rep_{res['replication']:03d}.npz" for res in done]
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "replications": rows,
        "failures": failures,
        "aggregates": aggregate(rows),
        "artifacts": artifacts,
    }
    _dump(report, out_dir / "report.json")
    write_rows_csv(rows, out_dir / "replications.csv")
    _dump({str(res["replication"]): res["folds"] for res in done}, out_dir / "folds.json")
    _dump({"total_seconds": time.perf_counter() - started,
           "replications": {str(res["replication"]): res["timings"] for res in done}},
          out_dir / "timings.json")
    return report


def validate_report(report: dict) -> None:
    """Structural check of a report plus recomputation of its aggregates."""
    required = {"schema_version", "config", "config_hash", "replications", "failures",
                "aggregates", "artifacts"}
    missing = required - set(report)
    if missing:
        raise ShapeError(f"report lacks keys {sorted(missing)}")
    if report["schema_version"] != SCHEMA_VERSION:
        raise ShapeError(f"unsupported schema_version {report['schema_version']}")
    for row in report["replications"]:
        if set(row) != set(REPORT_COLUMNS) or row["fold"] not in FOLDS:
            raise ShapeError(f"malformed replication row {row}")
    recomputed = aggregate(report["replications"])
    for key, metrics in recomputed.items():
        for m, summary in metrics.items():
            got = report["aggregates"][key][m]
            for stat in ("mean", "std"):
                a, b = got[stat], summary[stat]
                if (a is None) != (b is None) or (a is not None and not math.isclose(a, b, rel_tol=1e-12)):
                    raise ShapeError(f"aggregate {key}/{m}/{stat} does not match its rows")
