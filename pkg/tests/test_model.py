import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from civrep import diffnum as dn
from civrep import model as M
from civrep.data import SynthConfig, generate_synthetic, split
from civrep.errors import ConfigError, DataError, NumericError, ShapeError

from oracles import TINY_MODEL, log_loss, logistic_fit, tiny_model_fd_check


def _batch(rng, n, x_dim):
    return rng.normal(size=(n, x_dim)), rng.integers(0, 2, n).astype(float), rng.normal(size=n)


def _weights(params):
    return [p.data.copy() for p in params.parameters()]


# ---- config and initialisation

def test_config_defaults_and_validation():
    cfg = M.ModelConfig()
    assert (cfg.d_s, cfg.d_c, cfg.d_f, cfg.alpha, cfg.beta) == (1, 5, 5, 1.0, 1.0)
    assert (cfg.epochs, cfg.batch_size) == (100, 256)
    with pytest.raises(ConfigError):
        M.ModelConfig(d_c=0)
    with pytest.raises(ConfigError):
        M.ModelConfig(alpha=-1)
    with pytest.raises(ConfigError):
        M.ModelConfig(outcome="ordinal")
    with pytest.raises(ConfigError, match="unknown"):
        M.ModelConfig.from_dict({"latent": 3})
    assert M.ModelConfig.from_dict(M.ModelConfig(hidden=(8,)).to_dict()) == M.ModelConfig(hidden=(8,))


def test_init_shapes():
    cfg = M.ModelConfig()
    p = M.init_model(cfg, 6)
    assert (p.enc_s.in_dim, p.enc_s.out_dim) == (6, 2)
    assert p.enc_c.out_dim == p.enc_f.out_dim == p.prior_c.out_dim == 10
    assert (p.dec_x.in_dim, p.dec_x.out_dim) == (11, 12)
    assert p.head_w.in_dim == 6
    assert sorted(p.head_y) == sorted(M.Y_HEADS)
    assert all(net.in_dim == 10 for net in p.head_y.values())
    binary = M.init_model(M.ModelConfig(outcome="binary"), 6)
    assert list(binary.head_y) == ["logit"] and binary.head_y["logit"].in_dim == 11


def test_init_deterministic_and_seed_sensitive():
    a, b = M.init_model(M.ModelConfig(seed=3), 4), M.init_model(M.ModelConfig(seed=3), 4)
    assert all(np.array_equal(x, y) for x, y in zip(_weights(a), _weights(b)))
    c = M.init_model(M.ModelConfig(seed=4), 4)
    assert not np.array_equal(_weights(a)[0], _weights(c)[0])


def test_encode_rejects_wrong_width():
    p = M.init_model(M.ModelConfig(), 3)
    with pytest.raises(ShapeError):
        M.encode(p, np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        M.extract_representations(p, np.zeros((2, 4)))


# ---- objective

def test_kl_c_vanishes_when_prior_equals_encoder():
    cfg = M.ModelConfig(**TINY_MODEL)
    p = M.init_model(cfg, 3)
    p.prior_c = dn.Mlp.from_arrays([(l.weight.data, l.bias.data, l.activation) for l in p.enc_c.layers])
    _, terms = M.elbo(p, _batch(np.random.default_rng(0), 5, 3), np.random.default_rng(1))
    assert terms["kl_c"] == 0.0


def test_loss_without_auxiliaries_is_negative_elbo():
    cfg = M.ModelConfig(alpha=0.0, beta=0.0)
    p = M.init_model(cfg, 4)
    batch = _batch(np.random.default_rng(2), 16, 4)
    value, _ = M.loss(p, batch, cfg, np.random.default_rng(7))
    e, _ = M.elbo(p, batch, np.random.default_rng(7))
    assert float(value.data) == -float(e.data)


def test_alpha_scales_treatment_head_gradient():
    # head_w only enters through the W term, so its gradient is linear in alpha
    p = M.init_model(M.ModelConfig(**TINY_MODEL), 3)
    batch = _batch(np.random.default_rng(5), 4, 3)
    grads = []
    for alpha in (1.0, 2.5):
        cfg = M.ModelConfig(**TINY_MODEL, alpha=alpha)
        value, _ = M.loss(p, batch, cfg, np.random.default_rng(0))
        dn.zero_grad(p.parameters())
        dn.backward(value)
        grads.append(p.head_w.layers[0].weight.grad.copy())
    np.testing.assert_allclose(grads[1], 2.5 * grads[0], rtol=1e-12)
    assert np.abs(grads[0]).max() > 0


def test_loss_terms_reported():
    cfg = M.ModelConfig(**TINY_MODEL)
    p = M.init_model(cfg, 2)
    value, terms = M.loss(p, _batch(np.random.default_rng(0), 4, 2), cfg, np.random.default_rng(0))
    assert terms["loss"] == float(value.data)
    assert terms["loss"] == pytest.approx(terms["neg_elbo"] - terms["aux_w"] - terms["aux_y"])
    assert min(terms["kl_s"], terms["kl_c"], terms["kl_f"]) >= 0


@pytest.mark.parametrize("seed", range(10))
def test_full_loss_gradient_matches_finite_differences(seed):
    assert tiny_model_fd_check(seed) < 1e-4


def test_elbo_bounds_log_evidence():
    """With one-dimensional latents the evidence is a 3-d Gauss-Hermite integral."""
    cfg = M.ModelConfig(d_s=1, d_c=1, d_f=1, hidden=(4,))
    p = M.init_model(cfg, 1)
    rng = np.random.default_rng(0)
    for q in p.parameters():
        q.data += rng.normal(scale=0.3, size=q.data.shape)
    x = np.array([[0.7]])
    n = 200_000
    e = M._elbo_pass(p, np.repeat(x, n, axis=0), np.random.default_rng(1)).per_sample.data
    elbo, se = e.mean(), e.std(ddof=1) / np.sqrt(n)

    nodes, weights = hermegauss(40)
    weights = weights / weights.sum()
    prior = M.conditional_prior(p, x)
    mc, sc = prior.mu.data[0, 0], np.exp(prior.log_sigma.data[0, 0])
    s, c, f = np.meshgrid(nodes, mc + sc * nodes, nodes, indexing="ij")
    wgt = np.einsum("i,j,k->ijk", weights, weights, weights).ravel()
    out = p.dec_x.apply(np.column_stack([s.ravel(), c.ravel(), f.ravel()]))
    ls = np.clip(out[:, 1], dn.LOG_SIGMA_MIN, dn.LOG_SIGMA_MAX)
    lik = np.exp(-0.5 * ((x[0, 0] - out[:, 0]) / np.exp(ls)) ** 2 - ls - 0.5 * np.log(2 * np.pi))
    log_evidence = np.log(wgt @ lik)
    assert elbo - 3 * se <= log_evidence


def test_per_sample_elbo_rows_independent():
    cfg = M.ModelConfig(**TINY_MODEL)
    p = M.init_model(cfg, 2)
    x = np.random.default_rng(0).normal(size=(3, 2))
    full = M._elbo_pass(p, x, np.random.default_rng(4)).per_sample.data
    assert full.shape == (3,)
    assert np.all(np.isfinite(full))


# ---- training

@pytest.fixture(scope="module")
def trained():
    ds = generate_synthetic(SynthConfig(n=2000, seed=11))
    tr, te = split(ds, 0.7, seed=11)
    params, hist = M.train(tr, M.ModelConfig(seed=11))
    return tr, te, params, hist


def test_training_reduces_loss(trained):
    _, _, _, hist = trained
    assert len(hist.loss) == 100
    assert hist.loss[-1] < hist.loss[0]


def test_kl_terms_nonnegative_every_epoch(trained):
    _, _, _, hist = trained
    for k in ("kl_s", "kl_c", "kl_f"):
        assert min(getattr(hist, k)) >= 0


def test_reconstruction_beats_zero_vector(trained):
    _, te, params, _ = trained
    xs = params.x_scaler.transform(te.x)
    assert np.mean((M.reconstruct(params, te.x) - xs) ** 2) < np.mean(xs ** 2)


def test_treatment_head_beats_majority_rate(trained):
    _, te, params, _ = trained
    acc = np.mean((M.treatment_probability(params, te.x) > 0.5) == te.w)
    assert acc > max(te.w.mean(), 1 - te.w.mean())


def test_representations_carry_treatment_signal(trained):
    tr, te, params, _ = trained
    feats = lambda d: np.hstack(M.extract_representations(params, d.x))  # noqa: E731
    predict = logistic_fit(feats(tr), tr.w)
    assert log_loss(predict(feats(te)), te.w) < log_loss(np.full(te.n, tr.w.mean()), te.w)


def test_representation_shapes_and_row_determinism(trained):
    _, te, params, _ = trained
    x = np.vstack([te.x[:5], te.x[:1]])
    s, z = M.extract_representations(params, x)
    assert s.shape == (6, 1) and z.shape == (6, 10)
    np.testing.assert_array_equal(s[0], s[5])
    np.testing.assert_array_equal(z[0], z[5])


def test_zero_epochs_returns_initial_weights():
    ds = generate_synthetic(SynthConfig(n=40, seed=0))
    cfg = M.ModelConfig(epochs=0, hidden=(8,), seed=2)
    params, hist = M.train(ds, cfg)
    init = M.init_model(cfg, ds.x.shape[1])
    assert all(np.array_equal(a, b) for a, b in zip(_weights(params), _weights(init)))
    assert hist.loss == []


def test_training_deterministic():
    ds = generate_synthetic(SynthConfig(n=120, seed=0))
    cfg = M.ModelConfig(epochs=3, hidden=(8,), batch_size=32, seed=5)
    (pa, ha), (pb, hb) = M.train(ds, cfg), M.train(ds, cfg)
    assert ha.loss == hb.loss
    assert all(np.array_equal(a, b) for a, b in zip(_weights(pa), _weights(pb)))


def test_binary_outcome_head_trains():
    ds = generate_synthetic(SynthConfig(n=200, seed=0))
    ds.y0, ds.y1 = None, None
    ds.y = (ds.y > np.median(ds.y)).astype(float)
    params, hist = M.train(ds, M.ModelConfig(outcome="binary", epochs=2, hidden=(8,), batch_size=50))
    assert np.all(np.isfinite(hist.loss))
    s, z = M.extract_representations(params, ds.x)
    assert z.shape == (200, 10)


def test_training_preconditions():
    ds = generate_synthetic(SynthConfig(n=50, seed=0))
    with pytest.raises(DataError, match="batch size"):
        M.train(ds, M.ModelConfig(batch_size=256))
    with pytest.raises(DataError, match="binary outcome"):
        M.train(ds, M.ModelConfig(outcome="binary", batch_size=10, epochs=1))


def test_non_finite_loss_aborts_with_location(monkeypatch):
    ds = generate_synthetic(SynthConfig(n=40, seed=0))

    def broken(params, batch, cfg, rng):
        return dn.Value(np.array(np.nan)), {}

    monkeypatch.setattr(M, "loss", broken)
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        M.train(ds, M.ModelConfig(epochs=1, batch_size=10, hidden=(4,)))


# ---- checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ds = generate_synthetic(SynthConfig(n=64, seed=1))
    params, _ = M.train(ds, M.ModelConfig(epochs=2, hidden=(8, 4), batch_size=16, seed=3))
    M.save_checkpoint(params, tmp_path / "m.npz")
    back = M.load_checkpoint(tmp_path / "m.npz")
    assert back.cfg == params.cfg
    assert all(a.tobytes() == b.tobytes() for a, b in zip(_weights(back), _weights(params)))
    for got, want in zip(M.extract_representations(back, ds.x), M.extract_representations(params, ds.x)):
        assert got.tobytes() == want.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(DataError):
        M.load_checkpoint(tmp_path / "x.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(DataError):
        M.load_checkpoint(tmp_path / "junk.npz")
