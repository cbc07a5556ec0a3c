"""Effect estimators: two-stage IV, conditional Wald ratio, and baselines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .data import Dataset, Standardizer
from .errors import ConfigError, DataError, WeakInstrumentError

WEAK_INSTRUMENT_THRESHOLD = 0.05


@dataclass
class EffectEstimate:
    ace: float
    cace: np.ndarray
    estimator: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cace = np.asarray(self.cace, dtype=np.float64)
        if not np.isfinite(self.ace) or not np.all(np.isfinite(self.cace)):
            raise DataError(f"{self.estimator}: non-finite effect estimate")

    @classmethod
    def from_cace(cls, cace, estimator: str, **diagnostics) -> "EffectEstimate":
        cace = np.asarray(cace, dtype=np.float64)
        return cls(float(cace.mean()), cace, estimator, diagnostics)

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "ace": self.ace, "n": int(self.cace.size),
                "diagnostics": self.diagnostics}


# --------------------------------------------------------------------------
# two-stage IV with a binary treatment

@dataclass
class TwoStageConfig:
    hidden: tuple = (64, 64)
    # a short stage 1 keeps the propensity from fitting W noise, which carries confounding
    stage1_epochs: int = 30
    stage2_epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    val_frac: float = 0.0
    patience: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "TwoStageConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown two-stage config keys: {sorted(unknown)}")
        out = cls(**d)
        out.hidden = tuple(out.hidden)
        return out


@dataclass
class TwoStageModel:
    """Treatment model pi(s, z) and outcome response h(w, z).

    Inputs are standardised internally; ``h`` is fitted on a standardised
    outcome and rescaled on the way out.
    """

    stage1: dn.Mlp
    stage2: dn.Mlp
    sz_scaler: Standardizer
    z_scaler: Standardizer
    y_scaler: Standardizer
    diagnostics: dict = field(default_factory=dict)

    @property
    def z_dim(self) -> int:
        return self.stage2.in_dim - 1

    def propensity(self, s: np.ndarray, zrep: np.ndarray) -> np.ndarray:
        logit = self.stage1.apply(self.sz_scaler.transform(np.hstack([s, zrep])))[:, 0]
        return np.clip(1.0 / (1.0 + np.exp(-logit)), dn.PROB_FLOOR, 1.0 - dn.PROB_FLOOR)

    def response(self, w: float, zrep: np.ndarray) -> np.ndarray:
        zs = self.z_scaler.transform(zrep)
        out = self.stage2.apply(np.hstack([np.full((len(zs), 1), float(w)), zs]))[:, 0]
        return out * self.y_scaler.scale[0] + self.y_scaler.mean[0]


def _as_matrix(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise DataError(f"{name} must be a matrix")
    return a


def _minibatches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _fit_early_stopped(net: dn.Mlp, batch_loss, val_loss, n_train: int, max_epochs: int,
                       cfg: TwoStageConfig, rng) -> dict:
    """Adam on ``batch_loss(idx)``, keeping the weights with the best ``val_loss()``.

    Stops after ``cfg.patience`` epochs without improvement. When ``val_loss``
    is None every epoch runs and the final weights are kept.
    """
    params = net.parameters()
    opt = dn.Adam(params, lr=cfg.lr)
    best, best_epoch, snapshot = np.inf, max_epochs - 1, None
    for epoch in range(max_epochs):
        for idx in _minibatches(rng, n_train, cfg.batch_size):
            value = batch_loss(idx)
            opt.zero_grad()
            dn.backward(value)
            opt.step()
        if val_loss is None:
            continue
        current = val_loss()
        if current < best:
            best, best_epoch, snapshot = current, epoch, [p.data.copy() for p in params]
        elif epoch - best_epoch >= cfg.patience:
            break
    if snapshot is not None:
        for p, saved in zip(params, snapshot):
            p.data[...] = saved
    return {"epochs": best_epoch + 1, "val_loss": None if val_loss is None else float(best)}


def _holdout(n: int, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(n * frac))
    if n_val < 1 or n - n_val < 2:
        return np.arange(n), np.arange(0)
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _sigmoid(t):
    return np.clip(1.0 / (1.0 + np.exp(-t)), dn.PROB_FLOOR, 1.0 - dn.PROB_FLOOR)


def fit_two_stage(s, zrep, w, y, cfg: TwoStageConfig | None = None) -> TwoStageModel:
    """Fit pi(s, z) = P(W=1 | s, z) by log-loss, then h by the squared error of
    ``y - [pi h(1, z) + (1 - pi) h(0, z)]``.

    With a binary treatment the expectation of h over the first-stage
    treatment distribution is exactly this two-term sum, so no sampling is
    needed in stage two. By default both stages run a fixed number of epochs;
    with ``cfg.val_frac > 0`` they instead early-stop on a shared held-out slice.
    """
    cfg = cfg or TwoStageConfig()
    s, zrep = _as_matrix(s, "s"), _as_matrix(zrep, "zrep")
    w = np.asarray(w, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = len(y)
    if not (len(s) == len(zrep) == len(w) == n):
        raise DataError("s, zrep, w and y must have the same number of rows")
    if not np.isin(w, (0.0, 1.0)).all():
        raise DataError("treatment must be binary")
    if w.min() == w.max():
        raise DataError("degenerate treatment: every row has the same value")
    rng = np.random.default_rng([cfg.seed, 2])
    fit_rows, val_rows = _holdout(n, cfg.val_frac, rng)
    has_val = len(val_rows) > 0

    sz = np.hstack([s, zrep])
    sz_scaler = Standardizer.fit(sz[fit_rows])
    sz_std = sz_scaler.transform(sz)
    sign = (2.0 * w - 1.0).reshape(-1, 1)
    stage1 = dn.Mlp.build(sz.shape[1], cfg.hidden, 1, rng)

    def nll(rows):
        return -dn.mean(dn.log_sigmoid(stage1(sz_std[rows]) * sign[rows]))

    diag1 = _fit_early_stopped(
        stage1, lambda idx: nll(fit_rows[idx]),
        (lambda: float(nll(val_rows).data)) if has_val else None,
        len(fit_rows), cfg.stage1_epochs, cfg, rng)
    pi = _sigmoid(stage1.apply(sz_std)[:, :1])

    z_scaler = Standardizer.fit(zrep[fit_rows])
    zs = z_scaler.transform(zrep)
    y_scaler = Standardizer.fit(y[fit_rows].reshape(-1, 1))
    ys = y_scaler.transform(y.reshape(-1, 1))
    in1 = np.hstack([np.ones((n, 1)), zs])
    in0 = np.hstack([np.zeros((n, 1)), zs])
    stage2 = dn.Mlp.build(zs.shape[1] + 1, cfg.hidden, 1, rng)

    def mse(rows):
        p = pi[rows]
        pred = p * stage2(in1[rows]) + (1.0 - p) * stage2(in0[rows])
        return dn.mean(dn.square(pred - ys[rows]))

    diag2 = _fit_early_stopped(
        stage2, lambda idx: mse(fit_rows[idx]),
        (lambda: float(mse(val_rows).data)) if has_val else None,
        len(fit_rows), cfg.stage2_epochs, cfg, rng)

    pw = pi[:, 0]
    pred = pi * stage2.apply(in1) + (1 - pi) * stage2.apply(in0)
    return TwoStageModel(stage1, stage2, sz_scaler, z_scaler, y_scaler, {
        "stage1_logloss": float(-np.mean(w * np.log(pw) + (1 - w) * np.log(1 - pw))),
        "stage1_epochs": diag1["epochs"],
        "stage2_mse": float(np.mean((pred - ys) ** 2) * y_scaler.scale[0] ** 2),
        "stage2_epochs": diag2["epochs"],
        "stage1_prob_range": [float(pw.min()), float(pw.max())],
    })


def cace(model: TwoStageModel, zrep) -> np.ndarray:
    """Per-row effect h(1, z) - h(0, z)."""
    zrep = _as_matrix(zrep, "zrep")
    if zrep.shape[1] != model.z_dim:
        raise DataError(f"model expects {model.z_dim} conditioning columns, got {zrep.shape[1]}")
    return model.response(1.0, zrep) - model.response(0.0, zrep)


def two_stage_estimate(model: TwoStageModel, zrep, name: str) -> EffectEstimate:
    return EffectEstimate.from_cace(cace(model, zrep), name, **model.diagnostics)


# --------------------------------------------------------------------------
# Wald ratio with a binary instrument

def _ols(design: np.ndarray, target: np.ndarray) -> np.ndarray:
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise DataError("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    return coef


def wald_conditional(ds: Dataset, instrument: str, conditioning=(), method: str = "strata",
                     threshold: float = WEAK_INSTRUMENT_THRESHOLD) -> EffectEstimate:
    """Instrument-arm outcome contrast over instrument-arm treatment contrast.

    ``method="strata"`` computes the ratio within each distinct value of the
    (discrete) conditioning columns and averages by stratum size;
    ``method="regression"`` adjusts both contrasts with linear conditional
    means in the conditioning columns.
    """
    q = ds.column(instrument)
    if not np.isin(q, (0.0, 1.0)).all():
        raise DataError(f"instrument {instrument!r} must be binary")
    zcols = [ds.column(c) for c in conditioning]
    y, w = ds.y, ds.w.astype(np.float64)

    if method == "regression":
        design = np.column_stack([np.ones(ds.n), q, *zcols])
        num = _ols(design, y)[1]
        den = _ols(design, w)[1]
        if abs(den) < threshold:
            raise WeakInstrumentError("all", den, threshold)
        return EffectEstimate.from_cace(np.full(ds.n, num / den), "wald", method=method,
                                        numerator=float(num), denominator=float(den))
    if method != "strata":
        raise ConfigError(f"unknown Wald method {method!r}")

    keys = np.column_stack(zcols) if zcols else np.zeros((ds.n, 0))
    strata, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    per_row = np.empty(ds.n)
    detail = []
    for k in range(len(strata)):
        rows = inverse == k
        on, off = rows & (q == 1), rows & (q == 0)
        label = tuple(strata[k].tolist()) if zcols else "all"
        if not on.any() or not off.any():
            raise WeakInstrumentError(label, 0.0, threshold)
        den = w[on].mean() - w[off].mean()
        if abs(den) < threshold:
            raise WeakInstrumentError(label, den, threshold)
        num = y[on].mean() - y[off].mean()
        per_row[rows] = num / den
        detail.append({"stratum": label, "n": int(rows.sum()), "ratio": float(num / den)})
    return EffectEstimate.from_cace(per_row, "wald", method=method, strata=detail)


# --------------------------------------------------------------------------
# baselines

def naive_regression_ace(ds: Dataset) -> EffectEstimate:
    """Coefficient of w in a least-squares fit of y on (1, w, x)."""
    if ds.n <= ds.x.shape[1] + 2:
        raise DataError(f"need more than {ds.x.shape[1] + 2} rows for outcome regression")
    design = np.column_stack([np.ones(ds.n), ds.w, ds.x])
    coef = _ols(design, ds.y)
    return EffectEstimate.from_cace(np.full(ds.n, coef[1]), "naive")


@dataclass
class NaiveModel:
    coef: np.ndarray

    def estimate(self, ds: Dataset) -> EffectEstimate:
        return EffectEstimate.from_cace(np.full(ds.n, self.coef[1]), "naive")


def fit_naive(ds: Dataset) -> NaiveModel:
    if ds.n <= ds.x.shape[1] + 2:
        raise DataError(f"need more than {ds.x.shape[1] + 2} rows for outcome regression")
    return NaiveModel(_ols(np.column_stack([np.ones(ds.n), ds.w, ds.x]), ds.y))


ORACLE_INSTRUMENT = "S"
ORACLE_CONDITIONING = ("X1", "X2")


def fit_oracle(ds: Dataset, cfg: TwoStageConfig | None = None) -> TwoStageModel:
    """Two-stage fit using the true instrument S and conditioning set {X1, X2}."""
    s = ds.column(ORACLE_INSTRUMENT)
    z = np.column_stack([ds.column(c) for c in ORACLE_CONDITIONING])
    return fit_two_stage(s, z, ds.w, ds.y, cfg)


def oracle_zrep(ds: Dataset) -> np.ndarray:
    return np.column_stack([ds.column(c) for c in ORACLE_CONDITIONING])


def oracle_civ_estimate(ds: Dataset, cfg: TwoStageConfig | None = None) -> EffectEstimate:
    model = fit_oracle(ds, cfg)
    return two_stage_estimate(model, oracle_zrep(ds), "oracle")
