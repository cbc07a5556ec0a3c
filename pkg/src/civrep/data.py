"""Datasets: the synthetic benchmark generator, CSV I/O, splitting, scaling."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

ROLES = ("feature", "treatment", "outcome", "ignore")
Y0_COL, Y1_COL = "__y0", "__y1"
HIDDEN_PREFIX = "u_"
TRUE_ACE = 2.0
SYNTH_FEATURES = ["S", "X1", "X2", "X3", "X4", "X5"]
SYNTH_HIDDEN = ["U", "U1", "U2", "U3", "U4"]


@dataclass
class Dataset:
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    columns: list[str]
    y0: np.ndarray | None = None
    y1: np.ndarray | None = None
    hidden: np.ndarray | None = None
    hidden_columns: list[str] = field(default_factory=list)
    index: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.w = np.asarray(self.w).astype(np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = len(self.y)
        if self.x.ndim != 2 or self.x.shape[0] != n or len(self.w) != n:
            raise DataError(f"inconsistent shapes x={self.x.shape} w={self.w.shape} y={self.y.shape}")
        if self.x.shape[1] != len(self.columns):
            raise DataError(f"{self.x.shape[1]} feature columns but {len(self.columns)} names")
        if not np.isin(self.w, (0, 1)).all():
            raise DataError("treatment must be binary (0/1)")
        if self.index is None:
            self.index = np.arange(n)
        for name in ("x", "y", "y0", "y1", "hidden"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {name}")
        if (self.y0 is None) != (self.y1 is None):
            raise DataError("potential outcomes must be given together")
        if self.y0 is not None:
            self.y0 = np.asarray(self.y0, dtype=np.float64)
            self.y1 = np.asarray(self.y1, dtype=np.float64)
            if not np.array_equal(self.y, np.where(self.w == 1, self.y1, self.y0)):
                raise DataError("observed outcome differs from the selected potential outcome")
        if set(self.hidden_columns) & set(self.columns):
            raise DataError("hidden columns must not appear among features")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def has_potential_outcomes(self) -> bool:
        return self.y0 is not None

    def column(self, name: str) -> np.ndarray:
        try:
            return self.x[:, self.columns.index(name)]
        except ValueError:
            raise DataError(f"column {name!r} not in dataset (have {self.columns})") from None

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        take = lambda a: None if a is None else a[rows]  # noqa: E731
        return replace(self, x=self.x[rows], w=self.w[rows], y=self.y[rows], y0=take(self.y0),
                       y1=take(self.y1), hidden=take(self.hidden), index=self.index[rows],
                       meta=dict(self.meta))


@dataclass(frozen=True)
class SynthConfig:
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"sample size must be >= 2, got {self.n}")


def _logistic(t):
    return 1.0 / (1.0 + np.exp(-t))


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Benchmark with latent confounding, where S is an instrument given {X1, X2}.

    All N(m, v) draws use v as a variance. The true average effect is 2.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    u, u1, u2, u3, u4 = rng.normal(size=(5, n))
    e1, e2, e3, es = rng.normal(0.0, math.sqrt(0.5), size=(4, n))
    x1 = rng.normal(size=n) + 0.5 * u2 + e1
    x2 = rng.normal(size=n) + 0.5 * u3 + e2
    x3 = rng.normal(size=n) + 0.5 * u4 + e3
    s = rng.normal(size=n) + 2 * u1 + 1.5 * x1 + 1.5 * x2 + es
    x4 = rng.normal(1.0, 1.0, size=n)
    x5 = rng.normal(3.0, 1.0, size=n)
    p_treat = _logistic(-(2.0 - u - u1 - x3 - x4))
    w = (rng.uniform(size=n) < p_treat).astype(np.int64)
    base = 2.0 + 2 * u + 2 * u3 + 2 * u4 + x4 + x5
    eps0, eps1 = rng.normal(size=(2, n))
    y0 = base + eps0
    y1 = base + 2.0 + eps1
    y = np.where(w == 1, y1, y0)
    return Dataset(
        x=np.column_stack([s, x1, x2, x3, x4, x5]), w=w, y=y, columns=list(SYNTH_FEATURES),
        y0=y0, y1=y1, hidden=np.column_stack([u, u1, u2, u3, u4]),
        hidden_columns=list(SYNTH_HIDDEN),
        meta={"generator": "synthetic-v1", "seed": cfg.seed, "true_ace": TRUE_ACE},
    )


# --------------------------------------------------------------------------
# CSV

def default_schema(ds: Dataset, treatment: str = "W", outcome: str = "Y") -> dict[str, str]:
    schema = {c: "feature" for c in ds.columns}
    schema[treatment] = "treatment"
    schema[outcome] = "outcome"
    return schema


def write_csv(ds: Dataset, path, treatment: str = "W", outcome: str = "Y") -> dict[str, str]:
    """Write ``ds`` with exact (round-trippable) float text; return its schema."""
    header = list(ds.columns) + [treatment, outcome]
    cols = [ds.x[:, j] for j in range(ds.x.shape[1])] + [ds.w, ds.y]
    if ds.has_potential_outcomes:
        header += [Y0_COL, Y1_COL]
        cols += [ds.y0, ds.y1]
    if ds.hidden is not None:
        header += [HIDDEN_PREFIX + c for c in ds.hidden_columns]
        cols += [ds.hidden[:, j] for j in range(ds.hidden.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for i in range(ds.n):
            out.writerow([str(int(c[i])) if c is ds.w else repr(float(c[i])) for c in cols])
    return default_schema(ds, treatment, outcome)


def write_schema(schema: dict[str, str], path) -> None:
    Path(path).write_text(json.dumps(schema, indent=2) + "\n", encoding="utf-8")


def read_schema(path) -> dict[str, str]:
    try:
        schema = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read schema {path}: {exc}") from exc
    if not isinstance(schema, dict):
        raise DataError("schema must be a JSON object mapping column -> role")
    return schema


def _reserved(name: str) -> bool:
    return name in (Y0_COL, Y1_COL) or name.startswith(HIDDEN_PREFIX)


def load_csv(path, schema: dict[str, str]) -> Dataset:
    """Load a CSV according to ``schema`` (column -> role).

    Columns not named in the schema are features, except the generator's
    reserved columns: ``__y0``/``__y1`` are read back as potential outcomes and
    ``u_*`` as hidden diagnostics; neither is ever a feature.
    """
    bad = {c: r for c, r in schema.items() if r not in ROLES}
    if bad:
        raise DataError(f"unknown roles in schema: {bad}")
    treat = [c for c, r in schema.items() if r == "treatment"]
    outc = [c for c, r in schema.items() if r == "outcome"]
    if len(treat) != 1 or len(outc) != 1:
        raise DataError("schema needs exactly one treatment and one outcome column")
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: missing header row")
        missing = [c for c in schema if c not in header]
        if missing:
            raise DataError(f"{path}: schema columns missing from header: {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col!r}: cannot parse {cell!r}") from None
            rows.append(vals)
    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    pos = {c: j for j, c in enumerate(header)}
    w = table[:, pos[treat[0]]]
    if not np.isin(w, (0.0, 1.0)).all():
        raise DataError(f"treatment column {treat[0]!r} is not binary: values {sorted(set(w.tolist()))[:5]}")
    features = [c for c in header if schema.get(c, "feature") == "feature" and not _reserved(c)]
    hidden = [c for c in header if c.startswith(HIDDEN_PREFIX) and schema.get(c, "ignore") != "feature"]
    kw = {}
    if Y0_COL in pos and Y1_COL in pos:
        kw = {"y0": table[:, pos[Y0_COL]], "y1": table[:, pos[Y1_COL]]}
    return Dataset(
        x=table[:, [pos[c] for c in features]] if features else np.empty((len(rows), 0)),
        w=w.astype(np.int64), y=table[:, pos[outc[0]]], columns=features,
        hidden=table[:, [pos[c] for c in hidden]] if hidden else None,
        hidden_columns=[c[len(HIDDEN_PREFIX):] for c in hidden],
        meta={"source": str(path)}, **kw,
    )


# --------------------------------------------------------------------------
# splitting and scaling

def split(ds: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random train/test partition with ``ceil(n * train_frac)`` training rows."""
    if not 0.0 < train_frac < 1.0:
        raise ConfigError(f"train fraction must lie in (0, 1), got {train_frac}")
    n_train = math.ceil(ds.n * train_frac)
    if n_train >= ds.n or n_train == 0:
        raise DataError(f"split of {ds.n} rows at {train_frac} leaves a fold empty")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        scale = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(scale > 0, scale, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.scale + self.mean
