"""Neural illumination field: encoding, MLP, hand-written gradients, training.

The gradient oracle is central finite differences over every parameter of a
small network, evaluated against the analytic backward pass at frozen
self-consistency targets (the loss the gradient actually differentiates).
"""

import json

import numpy as np
import pytest

from splitsum.envmap import sample_bilinear, uv_to_dir
from splitsum.errors import DegenerateEstimatorError, DivergenceError
from splitsum.illum_field import (
    EncodingConfig,
    IllumField,
    Mlp,
    TrainBatch,
    TrainConfig,
    estimator_targets,
    export_envmap,
    fit,
    learning_rate_at,
    load_field,
    loss_and_grad,
    make_batch,
    new_illum_field,
    positional_encode,
    save_field,
)
from splitsum.sampling import RHO_MIN, RngStream, uniform_sphere

from _fixtures import blob_env, smooth_env


def _tiny_field(seed=0):
    enc = EncodingConfig(dir_frequencies=2, rough_frequencies=1)
    return IllumField(enc, Mlp([enc.feature_count, 8, 3], "softplus", RngStream(seed)))


def _tiny_batch(seed=1, n_rec=4, n_reg=3, n_light=64):
    r = RngStream(seed)
    recon_dirs, _ = uniform_sphere(r.child(0), n_rec)
    reg_dirs, _ = uniform_sphere(r.child(1), n_reg)
    light_dirs, _ = uniform_sphere(r.child(2), n_light)
    gen = r.child(3).gen
    return TrainBatch(
        recon_dirs=recon_dirs,
        recon_targets=gen.uniform(0.1, 2.0, (n_rec, 3)),
        reg_dirs=reg_dirs,
        reg_rhos=np.clip(gen.random(n_reg), RHO_MIN, 1.0),
        light_dirs=light_dirs,
    )


# ---------------------------------------------------------------------------
# Positional encoding

def test_feature_count():
    assert EncodingConfig().feature_count == 4 + 2 * (3 * 10 + 5)
    assert EncodingConfig(2, 1).feature_count == 18


def test_positional_encode_layout():
    cfg = EncodingConfig(dir_frequencies=1, rough_frequencies=1)
    d = np.array([0.0, 1.0, 0.0])
    x = positional_encode(d, 0.25, cfg)
    assert x.shape == (12,)
    assert np.array_equal(x[:3], d)
    assert x[3] == 0.25
    assert np.allclose(x[4:7], np.sin(np.pi * d))
    assert np.allclose(x[7:10], np.cos(np.pi * d))
    assert x[10] == pytest.approx(np.sin(np.pi * 0.25))
    assert x[11] == pytest.approx(np.cos(np.pi * 0.25))


def test_positional_encode_frequency_doubling():
    cfg = EncodingConfig(dir_frequencies=3, rough_frequencies=1)
    d = np.array([0.2, -0.5, 0.3])
    x = positional_encode(d, 0.0, cfg)
    # second direction frequency block uses 2*pi, third 4*pi
    assert np.allclose(x[10:13], np.sin(2 * np.pi * d))
    assert np.allclose(x[16:19], np.sin(4 * np.pi * d))


def test_positional_encode_broadcasts():
    cfg = EncodingConfig(2, 1)
    dirs = np.zeros((2, 4, 3))
    dirs[..., 1] = 1.0
    rho = np.full((2, 4), 0.5)
    x = positional_encode(dirs, rho, cfg)
    assert x.shape == (2, 4, 18)
    flat = positional_encode(dirs[0, 0], 0.5, cfg)
    assert np.array_equal(x[1, 3], flat)


# ---------------------------------------------------------------------------
# MLP mechanics

def test_mlp_validation():
    with pytest.raises(ValueError):
        Mlp([5])
    with pytest.raises(ValueError):
        Mlp([5, 3], out_activation="tanh")


def test_mlp_softplus_output_positive():
    mlp = Mlp([6, 16, 3], rng=RngStream(2))
    x = RngStream(3).gen.normal(size=(50, 6))
    assert np.all(mlp.forward(x) > 0)


def test_mlp_forward_cache_matches_forward():
    mlp = Mlp([6, 16, 16, 3], rng=RngStream(4))
    x = RngStream(5).gen.normal(size=(10, 6))
    y, _ = mlp.forward_cache(x)
    assert np.array_equal(y, mlp.forward(x))


def test_mlp_flat_roundtrip():
    mlp = Mlp([6, 8, 3], rng=RngStream(6))
    flat = mlp.get_flat()
    assert flat.size == 6 * 8 + 8 + 8 * 3 + 3
    mlp2 = Mlp([6, 8, 3], rng=RngStream(7))
    mlp2.set_flat(flat)
    assert np.array_equal(mlp2.get_flat(), flat)
    x = RngStream(8).gen.normal(size=(4, 6))
    assert np.array_equal(mlp.forward(x), mlp2.forward(x))
    with pytest.raises(ValueError):
        mlp.set_flat(flat[:-1])


def test_illum_field_validation():
    enc = EncodingConfig(2, 1)
    with pytest.raises(ValueError):
        IllumField(enc, Mlp([7, 8, 3]))  # wrong input width
    with pytest.raises(ValueError):
        IllumField(enc, Mlp([18, 8, 2]))  # not RGB


def test_new_illum_field_dims():
    f = new_illum_field(EncodingConfig(2, 1), hidden_layers=3, hidden_width=32)
    assert f.mlp.dims == [18, 32, 32, 32, 3]


def test_field_forward_shapes_and_positivity():
    f = _tiny_field()
    dirs, _ = uniform_sphere(RngStream(9), 7)
    out = f.forward(dirs, 0.3)
    assert out.shape == (7, 3)
    assert np.all(out > 0)
    one = f.forward(dirs[0], 0.3)
    assert one.shape == (3,)
    assert np.allclose(one, out[0], rtol=1e-12)


# ---------------------------------------------------------------------------
# Gradient oracle: central differences over every parameter

def test_analytic_gradient_matches_finite_differences():
    field = _tiny_field(seed=10)
    batch = _tiny_batch(seed=11)
    gbar = estimator_targets(field, batch)

    def loss_at(vec):
        field.mlp.set_flat(vec)
        loss, _, _ = loss_and_grad(field, batch, 2.0, 3.0, gbar=gbar)
        return loss

    theta = field.mlp.get_flat().copy()
    _, grad, _ = loss_and_grad(field, batch, 2.0, 3.0, gbar=gbar)
    h = 1e-6
    fd = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        fd[i] = (loss_at(theta + step) - loss_at(theta - step)) / (2 * h)
    field.mlp.set_flat(theta)
    rel = np.abs(fd - grad) / np.maximum(np.abs(fd) + np.abs(grad), 1e-8)
    assert rel.max() < 1e-5


def test_gradient_zero_at_exact_fit():
    # force a constant field equal to the targets: residuals and grads vanish
    field = _tiny_field(seed=12)
    for w in field.mlp.weights:
        w[...] = 0.0
    field.mlp.biases[-1][...] = 0.0  # softplus(0) = log 2
    const = np.log(2.0)
    batch = _tiny_batch(seed=13)
    batch.recon_targets = np.full_like(batch.recon_targets, const)
    loss, grad, aux = loss_and_grad(field, batch)
    assert loss == pytest.approx(0.0, abs=1e-24)
    # hidden weights are zero, so only final-layer bias gradients can be
    # nonzero, and the zero residual kills those too
    assert np.allclose(grad, 0.0, atol=1e-15)
    assert np.allclose(aux["gbar"], const)


# ---------------------------------------------------------------------------
# Loss structure

def test_estimator_targets_exact_for_constant_field():
    field = _tiny_field(seed=14)
    field.mlp.weights[-1][...] = 0.0
    field.mlp.biases[-1][...] = np.array([0.2, -1.0, 1.3])
    const = np.logaddexp(0.0, np.array([0.2, -1.0, 1.3]))
    batch = _tiny_batch(seed=15, n_reg=8)
    gbar = estimator_targets(field, batch)
    assert gbar.shape == (8, 3)
    assert np.allclose(gbar, const, rtol=1e-12)


def test_estimator_targets_degenerate_probe_raises():
    field = _tiny_field(seed=16)
    batch = _tiny_batch(seed=17)
    batch.light_dirs = np.array([[0.0, 1.0, 0.0]])
    batch.reg_dirs = np.array([[0.0, -1.0, 0.0]])
    batch.reg_rhos = np.array([0.5])
    with pytest.raises(DegenerateEstimatorError):
        estimator_targets(field, batch)


def test_loss_is_weighted_sum_of_diagnostics():
    field = _tiny_field(seed=18)
    batch = _tiny_batch(seed=19)
    loss, _, aux = loss_and_grad(field, batch, 7.0, 0.25)
    assert loss == pytest.approx(7.0 * aux["rec"] + 0.25 * aux["reg"], rel=1e-12)


def test_gradient_is_linear_in_loss_weights():
    field = _tiny_field(seed=20)
    batch = _tiny_batch(seed=21)
    gbar = estimator_targets(field, batch)
    _, g_rec, _ = loss_and_grad(field, batch, 1.0, 0.0, gbar=gbar)
    _, g_reg, _ = loss_and_grad(field, batch, 0.0, 1.0, gbar=gbar)
    _, g_both, _ = loss_and_grad(field, batch, 2.0, 3.0, gbar=gbar)
    assert np.allclose(g_both, 2.0 * g_rec + 3.0 * g_reg, rtol=1e-9, atol=1e-12)


def test_default_gbar_matches_estimator_targets():
    field = _tiny_field(seed=22)
    batch = _tiny_batch(seed=23)
    _, _, aux = loss_and_grad(field, batch)
    assert np.array_equal(aux["gbar"], estimator_targets(field, batch))


# ---------------------------------------------------------------------------
# Schedule, batches, training loop

def test_learning_rate_schedule():
    cfg = TrainConfig(steps=100, learning_rate=1e-2, warmup_steps=20, lr_decay=0.1)
    assert learning_rate_at(cfg, 0) == pytest.approx(1e-2 / 20)
    assert learning_rate_at(cfg, 9) == pytest.approx(1e-2 * 0.5)
    assert learning_rate_at(cfg, 19) == pytest.approx(1e-2)
    assert learning_rate_at(cfg, 60) == pytest.approx(1e-2 * 0.1 ** (40 / 80))
    assert learning_rate_at(cfg, 99) == pytest.approx(1e-2 * 0.1 ** (79 / 80))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(reg_batch=1)
    with pytest.raises(ValueError):
        TrainConfig(light_samples=8)


def test_make_batch_contents():
    env = smooth_env()
    cfg = TrainConfig(recon_batch=32, reg_batch=10, light_samples=64)
    batch = make_batch(env, cfg, RngStream(24))
    assert batch.recon_dirs.shape == (32, 3)
    assert np.array_equal(batch.recon_targets, sample_bilinear(env, batch.recon_dirs))
    assert batch.reg_rhos.shape == (10,)
    assert np.all(batch.reg_rhos >= RHO_MIN) and np.all(batch.reg_rhos <= 1.0)
    assert np.all(batch.reg_rhos[5:] == 1.0)  # second half pinned at full rough
    assert batch.light_dirs.shape == (64, 3)
    again = make_batch(env, cfg, RngStream(24))
    assert np.array_equal(batch.recon_dirs, again.recon_dirs)
    assert np.array_equal(batch.reg_rhos, again.reg_rhos)


_FAST = dict(
    steps=25,
    recon_batch=64,
    reg_batch=8,
    light_samples=64,
    hidden_layers=2,
    hidden_width=16,
    dir_frequencies=4,
    rough_frequencies=2,
    warmup_steps=5,
    seed=1,
)


def test_fit_runs_and_reduces_loss():
    env = blob_env(width=16)
    calls = []
    field, history = fit(env, TrainConfig(**_FAST), log=lambda *a: calls.append(a))
    assert history.shape == (25, 4)
    assert np.all(np.isfinite(history))
    assert history[-1, 0] < history[0, 0]
    assert len(calls) == 25
    step, loss, rec, reg, lr = calls[7]
    assert step == 7
    assert (loss, rec, reg, lr) == tuple(history[7])
    assert np.allclose(
        history[:, 3], [learning_rate_at(TrainConfig(**_FAST), s) for s in range(25)]
    )
    dirs, _ = uniform_sphere(RngStream(0), 4)
    assert np.all(field.forward(dirs, 0.5) > 0)


def test_fit_is_deterministic():
    env = blob_env(width=16)
    f1, h1 = fit(env, TrainConfig(**_FAST))
    f2, h2 = fit(env, TrainConfig(**_FAST))
    assert np.array_equal(f1.mlp.get_flat(), f2.mlp.get_flat())
    assert np.array_equal(h1, h2)


def test_fit_raises_divergence_error_on_blowup():
    env = blob_env(width=16)
    cfg = TrainConfig(**{**_FAST, "steps": 6, "learning_rate": 1e200, "warmup_steps": 1})
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        fit(env, cfg)


# ---------------------------------------------------------------------------
# Export and serialization

def test_export_envmap_matches_field_at_texel_centers():
    field = _tiny_field(seed=25)
    m = export_envmap(field, 0.3, 8)
    assert m.texels.shape == (4, 8, 3)
    u, v = (2 + 0.5) / 8, (1 + 0.5) / 4
    expect = field.forward(uv_to_dir(u, v), 0.3)
    assert np.allclose(m.texels[1, 2], expect, rtol=1e-6)
    with pytest.raises(ValueError):
        export_envmap(field, 0.0, 7)
    with pytest.raises(ValueError):
        export_envmap(field, 0.0, 0)


def test_save_load_field_roundtrip(tmp_path):
    field = _tiny_field(seed=26)
    p = tmp_path / "f.illf"
    save_field(field, p)
    back = load_field(p)
    assert back.encoding.dir_frequencies == 2
    assert back.encoding.rough_frequencies == 1
    assert back.mlp.dims == field.mlp.dims
    # weights round through little-endian f32
    expect = field.mlp.get_flat().astype(np.float32).astype(np.float64)
    assert np.array_equal(back.mlp.get_flat(), expect)
    sidecar = json.loads((tmp_path / "f.illf.json").read_text())
    assert sidecar["layer_dims"] == field.mlp.dims
    assert sidecar["parameter_count"] == field.mlp.get_flat().size


def test_load_field_rejects_corruption(tmp_path):
    p = tmp_path / "bad.illf"
    p.write_bytes(b"XXXXX" + b"\0" * 40)
    with pytest.raises(ValueError):
        load_field(p)
    field = _tiny_field(seed=27)
    save_field(field, p)
    raw = p.read_bytes()
    p.write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(ValueError):
        load_field(p)
    p.write_bytes(raw[:-2])
    with pytest.raises(Exception):
        load_field(p)
