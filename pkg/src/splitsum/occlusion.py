"""Occlusion factors: per-channel visibility ratios under the diffuse and
specular transport lobes, estimated by Monte Carlo against mesh geometry.

The diffuse factor weights visibility by incoming radiance over a
cosine-sampled hemisphere; the specular factor uses lobe samples about a
given axis (the normal by default) with a clamped-cosine weight:

    o_d = sum(L_i V_i) / sum(L_i)
    o_s = sum(L_i V_i <w_i, n>+) / sum(L_i <w_i, n>+)

Both are per-channel. A baked table or a small sigmoid-output MLP over
surface position can stand in for fresh estimates at render time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envmap import RadianceMap, sample_bilinear
from .errors import DegenerateEstimatorError, DivergenceError
from .geometry import Bvh, TriangleMesh, occluded, sample_surface
from .illum_field import Mlp, learning_rate_at
from .sampling import RHO_MIN, RngStream, cos_hemisphere, ggx_lobe

OCCLUSION_MAGIC = b"OCCL1"


@dataclass
class OcclusionEstimate:
    """Per-channel occlusion factors with empirical standard errors.

    Estimators fill their own factor and leave the other at the neutral 1.
    """

    o_d: np.ndarray
    o_s: np.ndarray
    sample_count: int
    se_d: np.ndarray
    se_s: np.ndarray

    @classmethod
    def neutral(cls, sample_count: int = 0) -> "OcclusionEstimate":
        one = np.ones(3)
        zero = np.zeros(3)
        return cls(one.copy(), one.copy(), sample_count, zero.copy(), zero.copy())


def _ratio_and_se(num_terms: np.ndarray, den_terms: np.ndarray):
    """Per-channel ratio of sums plus a delta-method standard error.

    num_terms, den_terms: (n, 3) with num = den * visibility elementwise.
    """
    den = den_terms.sum(axis=0)
    if np.any(den <= 1e-12):
        raise DegenerateEstimatorError(
            "occlusion denominator vanished (black radiance under the lobe)"
        )
    ratio = num_terms.sum(axis=0) / den
    resid = num_terms - ratio[None, :] * den_terms
    se = np.sqrt((resid**2).sum(axis=0)) / den
    return ratio, se


def _t_min_for(bvh: Bvh | None, t_min: float | None) -> float:
    if t_min is not None:
        return t_min
    return bvh.mesh.default_t_min() if bvh is not None else 1e-6


def mc_occlusion_diffuse(x, n, env: RadianceMap, bvh: Bvh | None, n_samples: int = 64, rng: RngStream | None = None, t_min: float | None = None) -> OcclusionEstimate:
    """Diffuse occlusion factor at surface point x with normal n.

    Cosine-weighted hemisphere samples; the sampling pdf cancels in the
    ratio, leaving the radiance-weighted visibility. An unoccluded point
    returns exactly 1 in every channel.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng or RngStream(0)
    t_min = _t_min_for(bvh, t_min)
    dirs, _ = cos_hemisphere(n, rng, n_samples)
    radiance = sample_bilinear(env, dirs)
    vis = np.array([0.0 if occluded(bvh, x, d, t_min) else 1.0 for d in dirs])
    o_d, se_d = _ratio_and_se(radiance * vis[:, None], radiance)
    est = OcclusionEstimate.neutral(n_samples)
    est.o_d = o_d
    est.se_d = se_d
    return est


def mc_occlusion_specular(x, n, env: RadianceMap, bvh: Bvh | None, rho: float, n_samples: int = 64, rng: RngStream | None = None, axis=None, t_min: float | None = None) -> OcclusionEstimate:
    """Specular occlusion factor: lobe samples about `axis` (default n),
    clamped-cosine weighted per channel."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rho = float(np.clip(rho, RHO_MIN, 1.0))
    rng = rng or RngStream(0)
    t_min = _t_min_for(bvh, t_min)
    axis = np.asarray(n if axis is None else axis, dtype=np.float64)
    dirs, _ = ggx_lobe(axis, rho, rng, n_samples)
    radiance = sample_bilinear(env, dirs)
    cos = np.maximum(dirs @ np.asarray(n, dtype=np.float64), 0.0)
    vis = np.array([0.0 if occluded(bvh, x, d, t_min) else 1.0 for d in dirs])
    weighted = radiance * cos[:, None]
    o_s, se_s = _ratio_and_se(weighted * vis[:, None], weighted)
    est = OcclusionEstimate.neutral(n_samples)
    est.o_s = o_s
    est.se_s = se_s
    return est


def mc_occlusion(x, n, env: RadianceMap, bvh: Bvh | None, rho: float, n_samples: int = 64, rng: RngStream | None = None, axis=None, t_min: float | None = None) -> OcclusionEstimate:
    """Both factors at once (independent child streams)."""
    rng = rng or RngStream(0)
    d = mc_occlusion_diffuse(x, n, env, bvh, n_samples, rng.child(0), t_min)
    s = mc_occlusion_specular(x, n, env, bvh, rho, n_samples, rng.child(1), axis, t_min)
    return OcclusionEstimate(d.o_d, s.o_s, n_samples, d.se_d, s.se_s)


def channel_average(est: OcclusionEstimate) -> OcclusionEstimate:
    """Collapse both factors to their channel means (broadcast back to RGB).

    Standard errors are averaged the same way; a convenience, not a proper
    error propagation across correlated channels.
    """
    return OcclusionEstimate(
        o_d=np.full(3, est.o_d.mean()),
        o_s=np.full(3, est.o_s.mean()),
        sample_count=est.sample_count,
        se_d=np.full(3, est.se_d.mean()),
        se_s=np.full(3, est.se_s.mean()),
    )


def occlusion_loss(predicted, targets, weights, component: str = "diffuse") -> float:
    """Weighted squared error against estimated factors.

    loss = (1/n) sum_i w_i ||pred_i - target_i||^2 for the chosen component
    ("diffuse" -> o_d, "specular" -> o_s). Weights must sum to 1 (1e-6).
    """
    if component not in ("diffuse", "specular"):
        raise ValueError(f"unknown component {component!r}")
    predicted = [np.asarray(p, dtype=np.float64).reshape(3) for p in predicted]
    if len(predicted) != len(targets) or len(predicted) != len(weights):
        raise ValueError("predicted, targets, and weights lengths differ")
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-6:
        raise ValueError(f"weights must sum to 1, got {w.sum()}")
    tgt = np.stack([t.o_d if component == "diffuse" else t.o_s for t in targets])
    pred = np.stack(predicted)
    return float((w * ((pred - tgt) ** 2).sum(axis=1)).sum() / len(w))


# ---------------------------------------------------------------------------
# Fitted occlusion field

def _encode_positions(pos_norm: np.ndarray, frequencies: int) -> np.ndarray:
    feats = [pos_norm]
    for k in range(frequencies):
        w = (2.0**k) * np.pi
        feats.append(np.sin(w * pos_norm))
        feats.append(np.cos(w * pos_norm))
    return np.concatenate(feats, axis=-1)


@dataclass
class OcclusionFitConfig:
    steps: int = 500
    learning_rate: float = 5e-3
    warmup_steps: int = 50
    lr_decay: float = 0.1
    hidden_layers: int = 3
    hidden_width: int = 64
    frequencies: int = 6
    mc_samples: int = 64
    specular_rho: float = 0.5
    seed: int = 0


class OcclusionField:
    """Sigmoid-output MLP over normalized surface position -> (o_d, o_s)."""

    def __init__(self, mlp: Mlp, frequencies: int, bounds_lo, bounds_hi):
        self.mlp = mlp
        self.frequencies = frequencies
        self.bounds_lo = np.asarray(bounds_lo, dtype=np.float64)
        self.bounds_hi = np.asarray(bounds_hi, dtype=np.float64)

    def _normalize(self, positions: np.ndarray) -> np.ndarray:
        span = np.maximum(self.bounds_hi - self.bounds_lo, 1e-9)
        return 2.0 * (positions - self.bounds_lo) / span - 1.0

    def predict(self, positions) -> tuple[np.ndarray, np.ndarray]:
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        x = _encode_positions(self._normalize(positions), self.frequencies)
        y = self.mlp.forward(x)
        return y[:, :3], y[:, 3:]


def fit_occlusion_field(mesh: TriangleMesh, env: RadianceMap, sample_count: int, cfg: OcclusionFitConfig | None = None, bvh: Bvh | None = None) -> OcclusionField:
    """Fit the field to MC occlusion targets at area-uniform surface points.

    Full-batch Adam on the summed diffuse+specular occlusion_loss with
    uniform weights. Returns the trained field.
    """
    cfg = cfg or OcclusionFitConfig()
    if sample_count < 4:
        raise ValueError("need at least 4 surface samples")
    root = RngStream(cfg.seed)
    if bvh is None:
        bvh = Bvh(mesh)
    points = sample_surface(mesh, sample_count, root.child(0))
    positions = np.stack([p.position for p in points])
    targets = [
        mc_occlusion(
            p.position, p.normal, env, bvh, cfg.specular_rho, cfg.mc_samples,
            root.child(1000 + i),
        )
        for i, p in enumerate(points)
    ]
    t_d = np.stack([t.o_d for t in targets])
    t_s = np.stack([t.o_s for t in targets])

    lo, hi = mesh.bounds()
    in_dim = 3 + 6 * cfg.frequencies
    dims = [in_dim] + [cfg.hidden_width] * cfg.hidden_layers + [6]
    mlp = Mlp(dims, "sigmoid", root.child(1))
    field = OcclusionField(mlp, cfg.frequencies, lo, hi)
    x = _encode_positions(field._normalize(positions), cfg.frequencies)
    tgt = np.concatenate([t_d, t_s], axis=1)

    theta = mlp.get_flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.99, 1e-8
    sched = _ScheduleShim(cfg)
    for step in range(cfg.steps):
        y, cache = mlp.forward_cache(x)
        res = y - tgt
        loss = float((res**2).sum(axis=1).mean())
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite occlusion fit loss at step {step}")
        dy = (2.0 / len(x)) * res
        grads = mlp.backward(cache, dy)
        grad = np.concatenate([g.ravel() for g in grads])
        lr = learning_rate_at(sched, step)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        theta = theta - lr * (m / (1.0 - beta1 ** (step + 1))) / (
            np.sqrt(v / (1.0 - beta2 ** (step + 1))) + eps
        )
        mlp.set_flat(theta)
    return field


class _ScheduleShim:
    """Adapts OcclusionFitConfig to the learning-rate schedule interface."""

    def __init__(self, cfg: OcclusionFitConfig):
        self.steps = cfg.steps
        self.learning_rate = cfg.learning_rate
        self.warmup_steps = cfg.warmup_steps
        self.lr_decay = cfg.lr_decay


# ---------------------------------------------------------------------------
# Baked table

def save_occlusion_table(positions, estimates, path) -> None:
    """Binary table: magic, count, then per point position, o_d, o_s (f32)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) != len(estimates):
        raise ValueError("one estimate per position required")
    rows = np.empty((len(positions), 9), dtype="<f4")
    rows[:, :3] = positions
    rows[:, 3:6] = np.stack([e.o_d for e in estimates])
    rows[:, 6:9] = np.stack([e.o_s for e in estimates])
    with open(path, "wb") as f:
        f.write(OCCLUSION_MAGIC)
        f.write(struct.pack("<I", len(positions)))
        f.write(rows.tobytes())


def load_occlusion_table(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (positions, o_d, o_s) arrays."""
    raw = Path(path).read_bytes()
    if raw[: len(OCCLUSION_MAGIC)] != OCCLUSION_MAGIC:
        raise ValueError("not an occlusion table (bad magic)")
    (count,) = struct.unpack_from("<I", raw, len(OCCLUSION_MAGIC))
    body = raw[len(OCCLUSION_MAGIC) + 4 :]
    if len(body) != count * 9 * 4:
        raise ValueError("occlusion table payload size mismatch")
    rows = np.frombuffer(body, dtype="<f4").reshape(count, 9).astype(np.float64)
    return rows[:, :3], rows[:, 3:6], rows[:, 6:9]


def nearest_table_lookup(positions_table, o_d, o_s, query_positions) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor occlusion for query points, blocked brute force."""
    q = np.atleast_2d(np.asarray(query_positions, dtype=np.float64))
    out_d = np.empty((len(q), 3))
    out_s = np.empty((len(q), 3))
    block = 1024
    for s in range(0, len(q), block):
        e = min(s + block, len(q))
        d2 = ((q[s:e, None, :] - positions_table[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        out_d[s:e] = o_d[idx]
        out_s[s:e] = o_s[idx]
    return out_d, out_s
