"""Disentangled VAE learning an instrument representation S and its
conditioning representations C and F from covariates.

Inference: three independent encoders q(S|X), q(C|X), q(F|X).
Generative side: N(0, I) priors on S and F, a learned conditional prior
p(C|X), a Gaussian decoder p(X|S,C,F), a treatment head p(W|S,C) and an
outcome head p(Y|W,C,F) (per-arm Gaussian mean / log-sigma networks, or a
Bernoulli logit network for binary outcomes).

All functions here work in model space: covariates and a continuous outcome
standardised with the statistics stored in :class:`ModelParams`.
``train`` and ``extract_representations`` take raw data and apply them.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffnum as dn
from .data import Dataset, Standardizer
from .errors import ConfigError, DataError, NumericError, ShapeError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "civrep-checkpoint-v1"
Y_HEADS = ("mu1", "mu0", "logsig1", "logsig0")
# output layers start small so every log-sigma begins near 0 (unit variance)
INIT_OUT_GAIN = 0.1


@dataclass
class ModelConfig:
    d_s: int = 1
    d_c: int = 5
    d_f: int = 5
    hidden: tuple = (64, 64)
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    outcome: str = "continuous"
    mc_samples: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if min(self.d_s, self.d_c, self.d_f) < 1:
            raise ConfigError("latent dimensions must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.mc_samples < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and mc_samples >= 1 required")
        if self.outcome not in ("continuous", "binary"):
            raise ConfigError(f"outcome must be 'continuous' or 'binary', got {self.outcome!r}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden sizes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class ModelParams:
    cfg: ModelConfig
    x_dim: int
    enc_s: dn.Mlp
    enc_c: dn.Mlp
    enc_f: dn.Mlp
    prior_c: dn.Mlp
    dec_x: dn.Mlp
    head_w: dn.Mlp
    head_y: dict
    x_scaler: Standardizer
    y_scaler: Standardizer

    def networks(self) -> dict[str, dn.Mlp]:
        nets = {"enc_s": self.enc_s, "enc_c": self.enc_c, "enc_f": self.enc_f,
                "prior_c": self.prior_c, "dec_x": self.dec_x, "head_w": self.head_w}
        nets.update({f"head_y.{k}": v for k, v in self.head_y.items()})
        return nets

    def parameters(self) -> list[dn.Value]:
        return [p for net in self.networks().values() for p in net.parameters()]


@dataclass
class LatentPosteriors:
    qs: dn.DiagGaussian
    qc: dn.DiagGaussian
    qf: dn.DiagGaussian


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    neg_elbo: list = field(default_factory=list)
    kl_s: list = field(default_factory=list)
    kl_c: list = field(default_factory=list)
    kl_f: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    aux_w: list = field(default_factory=list)
    aux_y: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def init_model(cfg: ModelConfig, x_dim: int) -> ModelParams:
    """Seeded initialisation; networks are built in a fixed order."""
    if x_dim < 1:
        raise ShapeError("need at least one covariate")
    rng = np.random.default_rng([cfg.seed, 0])
    h = cfg.hidden
    build = lambda i, o: dn.Mlp.build(i, h, o, rng, out_gain=INIT_OUT_GAIN)  # noqa: E731
    if cfg.outcome == "continuous":
        head_y = {k: build(cfg.d_c + cfg.d_f, 1) for k in Y_HEADS}
    else:
        head_y = {"logit": build(1 + cfg.d_c + cfg.d_f, 1)}
    return ModelParams(
        cfg=cfg, x_dim=x_dim,
        enc_s=build(x_dim, 2 * cfg.d_s),
        enc_c=build(x_dim, 2 * cfg.d_c),
        enc_f=build(x_dim, 2 * cfg.d_f),
        prior_c=build(x_dim, 2 * cfg.d_c),
        dec_x=build(cfg.d_s + cfg.d_c + cfg.d_f, 2 * x_dim),
        head_w=build(cfg.d_s + cfg.d_c, 1),
        head_y=head_y,
        x_scaler=Standardizer(np.zeros(x_dim), np.ones(x_dim)),
        y_scaler=Standardizer(np.zeros(1), np.ones(1)),
    )


def _check_x(params: ModelParams, x) -> None:
    if np.ndim(x) != 2 or np.shape(x)[1] != params.x_dim:
        raise ShapeError(f"model expects [n x {params.x_dim}] covariates, got {np.shape(x)}")


def encode(params: ModelParams, x) -> LatentPosteriors:
    """Posterior families q(S|X), q(C|X), q(F|X) for standardised ``x``."""
    _check_x(params, x)
    cfg = params.cfg
    return LatentPosteriors(
        dn.DiagGaussian.from_net_output(params.enc_s(x), cfg.d_s),
        dn.DiagGaussian.from_net_output(params.enc_c(x), cfg.d_c),
        dn.DiagGaussian.from_net_output(params.enc_f(x), cfg.d_f),
    )


def conditional_prior(params: ModelParams, x) -> dn.DiagGaussian:
    _check_x(params, x)
    return dn.DiagGaussian.from_net_output(params.prior_c(x), params.cfg.d_c)


@dataclass
class _Pass:
    elbo: dn.Value            # batch mean
    per_sample: dn.Value      # [n]
    terms: dict               # batch means as floats
    draws: list               # [(s, c, f)] reparameterised samples


def _elbo_pass(params: ModelParams, x, rng: np.random.Generator) -> _Pass:
    cfg = params.cfg
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    post = encode(params, x)
    prior = conditional_prior(params, x)
    kl_s = dn.kl_std_normal(post.qs)
    kl_c = dn.kl_diag_gaussians(post.qc, prior)
    kl_f = dn.kl_std_normal(post.qf)
    recon, draws = None, []
    for _ in range(cfg.mc_samples):
        s = dn.reparameterize(post.qs, rng.standard_normal((n, cfg.d_s)))
        c = dn.reparameterize(post.qc, rng.standard_normal((n, cfg.d_c)))
        f = dn.reparameterize(post.qf, rng.standard_normal((n, cfg.d_f)))
        out = params.dec_x(dn.concat([s, c, f]))
        mu = dn.columns(out, 0, params.x_dim)
        ls = dn.clip(dn.columns(out, params.x_dim, 2 * params.x_dim), dn.LOG_SIGMA_MIN, dn.LOG_SIGMA_MAX)
        term = dn.total(dn.gaussian_logpdf_logsigma(x, mu, ls), axis=1)
        recon = term if recon is None else recon + term
        draws.append((s, c, f))
    recon = recon * (1.0 / cfg.mc_samples)
    per_sample = recon - kl_s - kl_c - kl_f
    terms = {"recon": float(recon.data.mean()), "kl_s": float(kl_s.data.mean()),
             "kl_c": float(kl_c.data.mean()), "kl_f": float(kl_f.data.mean())}
    return _Pass(dn.mean(per_sample), per_sample, terms, draws)


def elbo(params: ModelParams, batch, rng: np.random.Generator):
    """Monte-Carlo ELBO of a standardised batch ``(x, w, y)``.

    Returns ``(value, terms)`` where ``value`` is the batch-mean ELBO as a
    differentiable scalar and ``terms`` holds the batch-mean reconstruction
    log-likelihood and the three KL terms.
    """
    x, _, _ = batch
    p = _elbo_pass(params, x, rng)
    terms = dict(p.terms, elbo=float(p.elbo.data))
    return p.elbo, terms


def treatment_loglik(params: ModelParams, s, c, w) -> dn.Value:
    """Per-sample log p(W | S, C)."""
    logit = params.head_w(dn.concat([s, c]))
    return dn.total(dn.bernoulli_logpmf(dn.sigmoid(logit), np.asarray(w, float).reshape(-1, 1)), axis=1)


def outcome_loglik(params: ModelParams, w, c, f, y) -> dn.Value:
    """Per-sample log p(Y | W, C, F) under the configured outcome head."""
    w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if params.cfg.outcome == "binary":
        logit = params.head_y["logit"](dn.concat([dn.Value(w), c, f]))
        return dn.total(dn.bernoulli_logpmf(dn.sigmoid(logit), y), axis=1)
    cf = dn.concat([c, f])
    hy = {k: params.head_y[k](cf) for k in Y_HEADS}
    mu = w * hy["mu1"] + (1.0 - w) * hy["mu0"]
    ls = dn.clip(w * hy["logsig1"] + (1.0 - w) * hy["logsig0"], dn.LOG_SIGMA_MIN, dn.LOG_SIGMA_MAX)
    return dn.total(dn.gaussian_logpdf_logsigma(y, mu, ls), axis=1)


def loss(params: ModelParams, batch, cfg: ModelConfig | None, rng: np.random.Generator):
    """Training objective (minimised): -ELBO minus weighted auxiliary log-likelihoods.

    The auxiliary terms are likelihoods of the observed treatment and outcome
    under the heads, evaluated at the same reparameterised latents as the
    reconstruction term. Returns ``(value, terms)``.
    """
    cfg = cfg or params.cfg
    x, w, y = batch
    p = _elbo_pass(params, x, rng)
    total_loss = -p.elbo
    aux_w = aux_y = 0.0
    if cfg.alpha or cfg.beta:
        lw = ly = None
        for s, c, f in p.draws:
            tw = treatment_loglik(params, s, c, w)
            ty = outcome_loglik(params, w, c, f, y)
            lw = tw if lw is None else lw + tw
            ly = ty if ly is None else ly + ty
        k = 1.0 / len(p.draws)
        lw, ly = dn.mean(lw) * k, dn.mean(ly) * k
        total_loss = total_loss - cfg.alpha * lw - cfg.beta * ly
        aux_w, aux_y = float(lw.data), float(ly.data)
    terms = dict(p.terms, neg_elbo=float(-p.elbo.data), aux_w=aux_w, aux_y=aux_y,
                 loss=float(total_loss.data))
    return total_loss, terms


def _model_space(params: ModelParams, ds: Dataset):
    x = params.x_scaler.transform(ds.x)
    y = ds.y if params.cfg.outcome == "binary" else params.y_scaler.transform(ds.y.reshape(-1, 1))[:, 0]
    return x, ds.w.astype(np.float64), y


def train(ds: Dataset, cfg: ModelConfig) -> tuple[ModelParams, TrainHistory]:
    """Mini-batch Adam on the objective; scaling statistics come from ``ds`` only."""
    if ds.x.shape[1] < 1:
        raise DataError("no covariates to learn representations from")
    if cfg.epochs > 0 and ds.n < cfg.batch_size:
        raise DataError(f"{ds.n} rows is fewer than batch size {cfg.batch_size}")
    if cfg.outcome == "binary" and not np.isin(ds.y, (0.0, 1.0)).all():
        raise DataError("binary outcome head needs a 0/1 outcome")
    params = init_model(cfg, ds.x.shape[1])
    params.x_scaler = Standardizer.fit(ds.x)
    if cfg.outcome == "continuous":
        params.y_scaler = Standardizer.fit(ds.y.reshape(-1, 1))
    x, w, y = _model_space(params, ds)
    hist = TrainHistory()
    rng = np.random.default_rng([cfg.seed, 1])
    opt = dn.Adam(params.parameters(), lr=cfg.lr)
    for epoch in range(cfg.epochs):
        order = rng.permutation(ds.n)
        sums, seen = {}, 0
        for b, start in enumerate(range(0, ds.n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            value, terms = loss(params, (x[idx], w[idx], y[idx]), cfg, rng)
            if not np.isfinite(value.data):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            dn.backward(value)
            try:
                opt.step()
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            seen += len(idx)
        for k in ("loss", "neg_elbo", "kl_s", "kl_c", "kl_f", "recon", "aux_w", "aux_y"):
            getattr(hist, k).append(sums[k] / seen)
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d loss %.4f", epoch, hist.loss[-1])
    return params, hist


def posterior_means(params: ModelParams, x_model: np.ndarray):
    """Posterior means of S, C, F for standardised covariates (no graph)."""
    _check_x(params, x_model)
    cfg = params.cfg
    return (params.enc_s.apply(x_model)[:, :cfg.d_s],
            params.enc_c.apply(x_model)[:, :cfg.d_c],
            params.enc_f.apply(x_model)[:, :cfg.d_f])


def extract_representations(params: ModelParams, x: np.ndarray):
    """Instrument representation S and conditioning representation (C, F).

    ``x`` is raw covariates; returns posterior means ``(s [n x d_s],
    zrep [n x (d_c + d_f)])``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_x(params, x)
    s, c, f = posterior_means(params, params.x_scaler.transform(x))
    return s, np.hstack([c, f])


def reconstruct(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Decoder mean at the posterior means, in standardised units."""
    s, c, f = posterior_means(params, params.x_scaler.transform(x))
    return params.dec_x.apply(np.hstack([s, c, f]))[:, :params.x_dim]


def treatment_probability(params: ModelParams, x: np.ndarray) -> np.ndarray:
    s, c, _ = posterior_means(params, params.x_scaler.transform(x))
    logit = params.head_w.apply(np.hstack([s, c]))[:, 0]
    return 1.0 / (1.0 + np.exp(-logit))


# --------------------------------------------------------------------------
# checkpoints: one .npz holding the config as JSON plus every weight array

def save_checkpoint(params: ModelParams, path) -> None:
    arrays = {
        "__format__": np.array(CHECKPOINT_FORMAT),
        "__config__": np.array(json.dumps({"model": params.cfg.to_dict(), "x_dim": params.x_dim})),
        "x_scaler.mean": params.x_scaler.mean, "x_scaler.scale": params.x_scaler.scale,
        "y_scaler.mean": params.y_scaler.mean, "y_scaler.scale": params.y_scaler.scale,
    }
    for name, net in params.networks().items():
        for i, layer in enumerate(net.layers):
            arrays[f"{name}/{i}/weight"] = layer.weight.data
            arrays[f"{name}/{i}/bias"] = layer.bias.data
            arrays[f"{name}/{i}/activation"] = np.array(layer.activation)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> ModelParams:
    try:
        data = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    with data:
        if "__format__" not in data or str(data["__format__"]) != CHECKPOINT_FORMAT:
            raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        meta = json.loads(str(data["__config__"]))
        params = init_model(ModelConfig.from_dict(meta["model"]), meta["x_dim"])
        for name, net in params.networks().items():
            net.layers = [
                dn.Dense(dn.Value(data[f"{name}/{i}/weight"]), dn.Value(data[f"{name}/{i}/bias"]),
                         str(data[f"{name}/{i}/activation"]))
                for i in range(len(net.layers))
            ]
        params.x_scaler = Standardizer(data["x_scaler.mean"], data["x_scaler.scale"])
        params.y_scaler = Standardizer(data["y_scaler.mean"], data["y_scaler.scale"])
    return params
