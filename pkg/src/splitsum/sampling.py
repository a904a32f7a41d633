"""Direction samplers and splittable RNG streams.

Every sampler returns (directions, pdf) with pdfs taken over solid angle.
Streams are counter-based (Philox) and keyed by (seed, spawn path), so work
split across texels / pixels / steps draws identical numbers regardless of
execution order or thread count.
"""

from __future__ import annotations

import numpy as np

RHO_MIN = 1e-3  # roughness floor shared by samplers and estimators


class RngStream:
    """A seeded, splittable random stream.

    child(i) derives an independent stream keyed by index, stable across
    runs and scheduling. The underlying generator is exposed as .gen.
    """

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seq = np.random.SeedSequence(seed) if _seq is None else _seq
        self.gen = np.random.Generator(np.random.Philox(self.seq))

    def child(self, index: int) -> "RngStream":
        seq = np.random.SeedSequence(
            entropy=self.seq.entropy, spawn_key=self.seq.spawn_key + (index,)
        )
        return RngStream(0, _seq=seq)


def _as_rng(rng) -> np.random.Generator:
    return rng.gen if isinstance(rng, RngStream) else rng


def build_onb(n) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-handed orthonormal basis (t, b, n) for unit normals (..., 3).

    Branchless construction; stable for normals near -z.
    """
    n = np.asarray(n, dtype=np.float64)
    sign = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = np.stack(
        [1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1
    )
    bt = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return t, bt, n


def uniform_sphere(rng, count: int | None = None):
    """Uniform directions on the sphere; pdf = 1/(4pi)."""
    gen = _as_rng(rng)
    n = 1 if count is None else count
    z = 1.0 - 2.0 * gen.random(n)
    phi = 2.0 * np.pi * gen.random(n)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    pdf = np.full(n, 1.0 / (4.0 * np.pi))
    if count is None:
        return d[0], float(pdf[0])
    return d, pdf


def uniform_sphere_pdf() -> float:
    return 1.0 / (4.0 * np.pi)


def cos_hemisphere(n, rng, count: int | None = None):
    """Cosine-weighted directions about unit normal n; pdf = cos(theta)/pi."""
    gen = _as_rng(rng)
    m = 1 if count is None else count
    u1 = gen.random(m)
    u2 = gen.random(m)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    local = np.stack(
        [r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(0.0, 1.0 - u1))],
        axis=-1,
    )
    t, b, nn = build_onb(np.asarray(n, dtype=np.float64))
    d = local[..., :1] * t + local[..., 1:2] * b + local[..., 2:] * nn
    pdf = local[..., 2] / np.pi
    if count is None:
        return d[0], float(pdf[0])
    return d, pdf


def cos_hemisphere_pdf(n, d) -> np.ndarray:
    """pdf of cos_hemisphere at directions d; 0 below the horizon."""
    n = np.asarray(n, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    c = np.maximum(0.0, np.sum(n * d, axis=-1))
    return c / np.pi


def _simplified_ndf(t, rho):
    """Axis-aligned simplified GGX lobe, rho^2 / (pi ((1+t)/2 (rho^2-1) + 1)^2)."""
    a = rho * rho
    s = (1.0 + t) * 0.5
    den = s * (a - 1.0) + 1.0
    return a / (np.pi * den * den)


def ggx_lobe(axis, rho: float, rng, count: int | None = None):
    """Directions from the simplified GGX lobe about `axis`; pdf = D(t,rho)/4.

    t = <dir, axis>. Drawn by the analytic inverse CDF of the marginal in t,
    (pi/2) D(t, rho); azimuth uniform. At rho = 1 this is the uniform sphere.
    """
    if not RHO_MIN <= rho <= 1.0:
        raise ValueError(f"rho must be in [{RHO_MIN}, 1], got {rho}")
    gen = _as_rng(rng)
    m = 1 if count is None else count
    xi = gen.random(m)
    a = rho * rho
    # CDF in s = (1+t)/2 is a*s / (s*(a-1) + 1); invert for s.
    s = xi / (a * (1.0 - xi) + xi)
    t = np.clip(2.0 * s - 1.0, -1.0, 1.0)
    phi = 2.0 * np.pi * gen.random(m)
    r = np.sqrt(np.maximum(0.0, 1.0 - t * t))
    local = np.stack([r * np.cos(phi), r * np.sin(phi), t], axis=-1)
    tb, bb, nb = build_onb(np.asarray(axis, dtype=np.float64))
    d = local[..., :1] * tb + local[..., 1:2] * bb + local[..., 2:] * nb
    pdf = _simplified_ndf(t, rho) / 4.0
    if count is None:
        return d[0], float(pdf[0])
    return d, pdf


def ggx_lobe_pdf(axis, rho: float, d) -> np.ndarray:
    """pdf of ggx_lobe at directions d (full sphere support)."""
    if not RHO_MIN <= rho <= 1.0:
        raise ValueError(f"rho must be in [{RHO_MIN}, 1], got {rho}")
    axis = np.asarray(axis, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    t = np.clip(np.sum(axis * d, axis=-1), -1.0, 1.0)
    return _simplified_ndf(t, rho) / 4.0
