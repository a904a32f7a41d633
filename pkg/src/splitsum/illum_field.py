"""Trainable pre-integrated illumination field.

A small fully-connected network maps (direction, roughness) to positive RGB
through sin/cos positional encodings, ReLU hidden layers, and a softplus
output. Training combines direct reconstruction of the environment at
rho = 0 with a self-consistency regularizer: at random (direction, rho)
probes the field must match the shared-sample ratio estimate computed from
its own rho = 0 predictions (targets treated as constants, i.e. gradients
do not flow through the estimator).

Forward, backward, and Adam are written out by hand on numpy arrays; float64
throughout so analytic gradients can be checked against central finite
differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .envmap import RadianceMap, sample_bilinear, uv_to_dir
from .errors import DegenerateEstimatorError, DivergenceError
from .sampling import RHO_MIN, RngStream, _simplified_ndf, uniform_sphere

FIELD_MAGIC = b"ILLF1"


@dataclass
class EncodingConfig:
    """Sin/cos feature frequencies: 2^0..2^(k-1) times pi, per component."""

    dir_frequencies: int = 10
    rough_frequencies: int = 5

    @property
    def feature_count(self) -> int:
        return 4 + 2 * (3 * self.dir_frequencies + self.rough_frequencies)


def positional_encode(dirs, rho, cfg: EncodingConfig) -> np.ndarray:
    """Encode unit dirs (..., 3) and roughness (...) to (..., feature_count).

    Layout: raw [dx, dy, dz, rho], then per direction frequency sin then cos
    of all three components, then per roughness frequency sin then cos.
    """
    d = np.asarray(dirs, dtype=np.float64)
    r = np.broadcast_to(np.asarray(rho, dtype=np.float64), d.shape[:-1])
    feats = [d, r[..., None]]
    for k in range(cfg.dir_frequencies):
        w = (2.0**k) * np.pi
        feats.append(np.sin(w * d))
        feats.append(np.cos(w * d))
    for k in range(cfg.rough_frequencies):
        w = (2.0**k) * np.pi
        feats.append(np.sin(w * r)[..., None])
        feats.append(np.cos(w * r)[..., None])
    return np.concatenate(feats, axis=-1)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Mlp:
    """Plain fully-connected net: ReLU hidden layers, configurable head."""

    def __init__(self, dims, out_activation: str = "softplus", rng: RngStream | None = None):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if out_activation not in ("softplus", "sigmoid", "linear"):
            raise ValueError(f"unknown output activation {out_activation!r}")
        self.dims = list(int(d) for d in dims)
        self.out_activation = out_activation
        gen = (rng or RngStream(0)).gen
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(gen.uniform(-lim, lim, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    # -- parameter plumbing ------------------------------------------------
    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, vec: np.ndarray) -> None:
        off = 0
        for p in self.parameters():
            p[...] = vec[off : off + p.size].reshape(p.shape)
            off += p.size
        if off != vec.size:
            raise ValueError("flat vector length mismatch")

    # -- forward / backward --------------------------------------------------
    def _head(self, z):
        if self.out_activation == "softplus":
            return _softplus(z)
        if self.out_activation == "sigmoid":
            return _sigmoid(z)
        return z

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return self._head(h @ self.weights[-1] + self.biases[-1])

    def forward_cache(self, x: np.ndarray):
        """Forward keeping activations for backward; returns (y, cache)."""
        h = np.asarray(x, dtype=np.float64)
        acts = [h]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            acts.append(h)
        z_out = h @ self.weights[-1] + self.biases[-1]
        return self._head(z_out), (acts, z_out)

    def backward(self, cache, dy: np.ndarray):
        """Gradients of sum(loss) given d loss/d output; returns per-param list
        ordered like parameters()."""
        acts, z_out = cache
        if self.out_activation == "softplus":
            dz = dy * _sigmoid(z_out)
        elif self.out_activation == "sigmoid":
            s = _sigmoid(z_out)
            dz = dy * s * (1.0 - s)
        else:
            dz = dy
        n_layers = len(self.weights)
        w_grads = [None] * n_layers
        b_grads = [None] * n_layers
        for li in range(n_layers - 1, -1, -1):
            w_grads[li] = acts[li].T @ dz
            b_grads[li] = dz.sum(axis=0)
            if li > 0:
                dz = (dz @ self.weights[li].T) * (acts[li] > 0)
        out = []
        for li in range(n_layers):
            out.append(w_grads[li])
            out.append(b_grads[li])
        return out


class IllumField:
    """Positional encoding + MLP mapping (direction, roughness) to radiance."""

    def __init__(self, encoding: EncodingConfig, mlp: Mlp):
        if mlp.dims[0] != encoding.feature_count:
            raise ValueError("MLP input dim must match encoding feature count")
        if mlp.dims[-1] != 3:
            raise ValueError("field output must be RGB")
        self.encoding = encoding
        self.mlp = mlp

    def forward(self, dirs, rho) -> np.ndarray:
        x = positional_encode(dirs, rho, self.encoding)
        flat = x.reshape(-1, x.shape[-1])
        y = self.mlp.forward(flat)
        return y.reshape(x.shape[:-1] + (3,))


def new_illum_field(encoding: EncodingConfig | None = None, hidden_layers: int = 4, hidden_width: int = 64, rng: RngStream | None = None) -> IllumField:
    enc = encoding or EncodingConfig()
    dims = [enc.feature_count] + [hidden_width] * hidden_layers + [3]
    return IllumField(enc, Mlp(dims, "softplus", rng or RngStream(0)))


# ---------------------------------------------------------------------------
# Loss

@dataclass
class TrainBatch:
    recon_dirs: np.ndarray  # (r, 3)
    recon_targets: np.ndarray  # (r, 3)
    reg_dirs: np.ndarray  # (s, 3)
    reg_rhos: np.ndarray  # (s,)
    light_dirs: np.ndarray  # (l, 3) shared estimator samples


def estimator_targets(field: IllumField, batch: TrainBatch) -> np.ndarray:
    """Ratio-estimator targets gbar at the regularizer probes, built from the
    field's own rho = 0 radiance at the shared light dirs. Constant w.r.t.
    the parameters by construction (evaluate once, then hold)."""
    g_light = field.forward(batch.light_dirs, 0.0)
    t = batch.reg_dirs @ batch.light_dirs.T
    w = _simplified_ndf(t, batch.reg_rhos[:, None]) * np.maximum(t, 0.0)
    den = w.sum(axis=1)
    if np.any(den <= 1e-12):
        raise DegenerateEstimatorError("regularizer probe saw no usable samples")
    return (w @ g_light) / den[:, None]


def loss_and_grad(field: IllumField, batch: TrainBatch, lambda_rec: float = 10.0, lambda_d: float = 10.0, gbar: np.ndarray | None = None):
    """Loss, flat parameter gradient, and diagnostics.

    loss = lambda_rec * mean ||g(w,0) - L(w)||^2
         + lambda_d   * mean ||g(s) - gbar(s)||^2

    gbar defaults to estimator_targets(field, batch); pass it explicitly to
    evaluate the loss with frozen targets (what the gradient differentiates).
    Returns (loss, grad_flat, aux) with aux = {rec, reg, gbar}.
    """
    if gbar is None:
        gbar = estimator_targets(field, batch)
    n_rec = len(batch.recon_dirs)
    n_reg = len(batch.reg_dirs)
    x_rec = positional_encode(batch.recon_dirs, 0.0, field.encoding)
    x_reg = positional_encode(batch.reg_dirs, batch.reg_rhos, field.encoding)
    y, cache = field.mlp.forward_cache(np.concatenate([x_rec, x_reg], axis=0))
    res_rec = y[:n_rec] - batch.recon_targets
    res_reg = y[n_rec:] - gbar
    rec = float((res_rec**2).sum(axis=1).mean())
    reg = float((res_reg**2).sum(axis=1).mean())
    loss = lambda_rec * rec + lambda_d * reg
    dy = np.concatenate(
        [(2.0 * lambda_rec / n_rec) * res_rec, (2.0 * lambda_d / n_reg) * res_reg],
        axis=0,
    )
    grads = field.mlp.backward(cache, dy)
    flat = np.concatenate([g.ravel() for g in grads])
    return loss, flat, {"rec": rec, "reg": reg, "gbar": gbar}


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 5e-3
    warmup_steps: int = 500
    lr_decay: float = 0.1  # final-step multiplier of the post-warmup decay
    recon_batch: int = 512
    reg_batch: int = 128
    light_samples: int = 8192
    lambda_rec: float = 10.0
    lambda_d: float = 10.0
    hidden_layers: int = 4
    hidden_width: int = 64
    dir_frequencies: int = 10
    rough_frequencies: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.recon_batch < 1 or self.reg_batch < 2:
            raise ValueError("steps and batch sizes must be positive (reg >= 2)")
        if self.light_samples < 16:
            raise ValueError("light_samples must be >= 16")


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the base rate, then exponential decay to base*lr_decay."""
    warm = min(1.0, (step + 1) / max(1, cfg.warmup_steps))
    decay = 1.0
    if step >= cfg.warmup_steps and cfg.steps > cfg.warmup_steps:
        frac = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
        decay = cfg.lr_decay**frac
    return cfg.learning_rate * warm * decay


def make_batch(env: RadianceMap, cfg: TrainConfig, rng: RngStream) -> TrainBatch:
    """Per-step batch: uniform recon dirs with bilinear targets, regularizer
    probes with half uniform / half unit roughness, and fresh light dirs."""
    gen = rng.gen
    recon_dirs, _ = uniform_sphere(rng, cfg.recon_batch)
    recon_targets = sample_bilinear(env, recon_dirs)
    reg_dirs, _ = uniform_sphere(rng, cfg.reg_batch)
    half = cfg.reg_batch // 2
    reg_rhos = np.concatenate(
        [
            np.clip(gen.random(half), RHO_MIN, 1.0),
            np.ones(cfg.reg_batch - half),
        ]
    )
    light_dirs, _ = uniform_sphere(rng, cfg.light_samples)
    return TrainBatch(recon_dirs, recon_targets, reg_dirs, reg_rhos, light_dirs)


def fit(env: RadianceMap, cfg: TrainConfig | None = None, log=None) -> tuple[IllumField, np.ndarray]:
    """Adam-fit a field to the environment.

    Returns (field, history) where history[step] = (loss, rec, reg, lr).
    Raises DivergenceError on non-finite loss or parameters. `log`, if given,
    is called with (step, loss, rec, reg, lr) each step.
    """
    cfg = cfg or TrainConfig()
    root = RngStream(cfg.seed)
    enc = EncodingConfig(cfg.dir_frequencies, cfg.rough_frequencies)
    field = new_illum_field(enc, cfg.hidden_layers, cfg.hidden_width, root.child(0))

    theta = field.mlp.get_flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.99, 1e-8
    history = np.empty((cfg.steps, 4))

    for step in range(cfg.steps):
        batch = make_batch(env, cfg, root.child(step + 1))
        loss, grad, aux = loss_and_grad(field, batch, cfg.lambda_rec, cfg.lambda_d)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(
                f"non-finite loss/gradient at step {step}: loss={loss}, "
                f"|grad|_max={np.abs(grad).max() if grad.size else 0}"
            )
        lr = learning_rate_at(cfg, step)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        mhat = m / (1.0 - beta1 ** (step + 1))
        vhat = v / (1.0 - beta2 ** (step + 1))
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite parameters after step {step}")
        field.mlp.set_flat(theta)
        history[step] = (loss, aux["rec"], aux["reg"], lr)
        if log is not None:
            log(step, loss, aux["rec"], aux["reg"], lr)
    return field, history


def export_envmap(field: IllumField, rho: float, width: int) -> RadianceMap:
    """Evaluate the field at every texel center of a width x width/2 map."""
    if width < 2 or width % 2:
        raise ValueError("width must be even and >= 2")
    height = width // 2
    u = (np.arange(width) + 0.5) / width
    vv = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, vv)
    dirs = uv_to_dir(uu, vv)
    return RadianceMap(field.forward(dirs, rho).astype(np.float32))


# ---------------------------------------------------------------------------
# Serialization: magic, encoding, layer dims, little-endian f32 weights,
# plus a human-readable JSON sidecar.

def save_field(field: IllumField, path) -> None:
    p = Path(path)
    dims = field.mlp.dims
    blob = [FIELD_MAGIC]
    blob.append(
        struct.pack(
            "<III",
            field.encoding.dir_frequencies,
            field.encoding.rough_frequencies,
            len(dims),
        )
    )
    blob.append(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(field.mlp.weights, field.mlp.biases):
        blob.append(w.astype("<f4").tobytes())
        blob.append(b.astype("<f4").tobytes())
    p.write_bytes(b"".join(blob))
    sidecar = {
        "format": FIELD_MAGIC.decode(),
        "dir_frequencies": field.encoding.dir_frequencies,
        "rough_frequencies": field.encoding.rough_frequencies,
        "layer_dims": dims,
        "output_activation": field.mlp.out_activation,
        "parameter_count": int(field.mlp.get_flat().size),
    }
    Path(str(p) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_field(path) -> IllumField:
    raw = Path(path).read_bytes()
    if raw[: len(FIELD_MAGIC)] != FIELD_MAGIC:
        raise ValueError("not an illumination field file (bad magic)")
    off = len(FIELD_MAGIC)
    dir_f, rough_f, n_dims = struct.unpack_from("<III", raw, off)
    off += 12
    dims = list(struct.unpack_from(f"<{n_dims}I", raw, off))
    off += 4 * n_dims
    enc = EncodingConfig(dir_f, rough_f)
    mlp = Mlp(dims, "softplus", RngStream(0))
    for li, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = np.frombuffer(raw, dtype="<f4", count=fan_in * fan_out, offset=off)
        off += 4 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        mlp.weights[li] = w.astype(np.float64).reshape(fan_in, fan_out)
        mlp.biases[li] = b.astype(np.float64)
    if off != len(raw):
        raise ValueError("field file has trailing or missing bytes")
    return IllumField(enc, mlp)
