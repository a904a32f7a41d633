"""Microfacet BRDF pieces and the split-sum environment-BRDF lookup table.

The GGX distribution uses the surface roughness directly as its width
parameter: D(h) = rho^2 / (pi (cos^2(h,n) (rho^2 - 1) + 1)^2). The LUT
tabulates the two Fresnel-factored halves of the directional reflectance
integral over (cos(n,v), rho): integral(f_s <l,n> dl) = F * F1 + F2, with
Schlick Fresnel and Smith height-correlated visibility throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Material
from .sampling import RngStream, _as_rng, _simplified_ndf

LUT_MAGIC = b"SSLUT1"


def ggx_ndf(cos_hn, rho):
    """Full GGX normal distribution; rho must be positive."""
    c2 = np.square(np.asarray(cos_hn, dtype=np.float64))
    a2 = rho * rho
    den = c2 * (a2 - 1.0) + 1.0
    return a2 / (np.pi * den * den)


def ggx_ndf_simplified(t, rho):
    """View-independent lobe approximation; t = <l, reflection dir>."""
    return _simplified_ndf(np.asarray(t, dtype=np.float64), rho)


def fresnel_f0(metalness, albedo):
    """Normal-incidence reflectance: lerp from dielectric 0.04 to albedo."""
    albedo = np.asarray(albedo, dtype=np.float64)
    m = np.asarray(metalness, dtype=np.float64)
    if m.ndim and albedo.ndim and albedo.shape[-1] == 3:
        m = m[..., None]
    return (1.0 - m) * 0.04 + m * albedo


def fresnel_roughness(f0, rho, cos_nv):
    """Roughness-adjusted Schlick term, clamped to [0, 1].

    F = F0 + (1 - rho - F0) (1 - cos)^5; the (1 - rho) ceiling damps the
    grazing response on rough surfaces. The trailing axis of f0 is the
    channel axis; array rho / cos_nv broadcast over it.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    c = np.clip(np.asarray(cos_nv, dtype=np.float64), 0.0, 1.0)
    r = np.asarray(rho, dtype=np.float64)
    fade = (1.0 - c) ** 5
    if f0.ndim and f0.shape[-1] == 3:
        if fade.ndim:
            fade = fade[..., None]
        if r.ndim:
            r = r[..., None]
    return np.clip(f0 + (1.0 - r - f0) * fade, 0.0, 1.0)


def diffuse_weight(metalness, f_r):
    """k_d = (1 - metalness) (1 - F): energy left for the diffuse lobe."""
    m = np.asarray(metalness, dtype=np.float64)
    f_r = np.asarray(f_r, dtype=np.float64)
    if m.ndim and f_r.ndim and f_r.shape[-1] == 3:
        m = m[..., None]
    return (1.0 - m) * (1.0 - f_r)


def smith_g2(cos_nv, cos_nl, rho):
    """Height-correlated Smith visibility for GGX; 0 below the horizon."""
    nv = np.asarray(cos_nv, dtype=np.float64)
    nl = np.asarray(cos_nl, dtype=np.float64)
    a2 = rho * rho

    def lam(c):
        c2 = np.square(np.clip(c, 1e-12, 1.0))
        return 0.5 * (-1.0 + np.sqrt(1.0 + a2 * (1.0 - c2) / c2))

    g = 1.0 / (1.0 + lam(nv) + lam(nl))
    return np.where((nv > 0) & (nl > 0), g, 0.0)


def cook_torrance_fs(w_i, w_o, n, material: Material):
    """Full microfacet specular BRDF value, (..., 3) over incident dirs.

    D * F * G / (4 <n,v> <n,l>) with Schlick Fresnel from the material's F0.
    Zero when either direction is below the horizon.
    """
    w_i = np.asarray(w_i, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    rho = max(material.roughness, 1e-4)

    h = w_i + w_o
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    nl = np.sum(n * w_i, axis=-1)
    nv = np.sum(n * w_o, axis=-1)
    nh = np.sum(n * h, axis=-1)
    vh = np.sum(w_o * h, axis=-1)

    d = ggx_ndf(np.clip(nh, 0.0, 1.0), rho)
    g = smith_g2(nv, nl, rho)
    f0 = fresnel_f0(material.metalness, material.albedo)
    f = f0 + (1.0 - f0) * np.power(1.0 - np.clip(vh, 0.0, 1.0), 5.0)[..., None]
    denom = 4.0 * np.maximum(nv * nl, 1e-6)
    spec = f * (d * g / denom)[..., None]
    live = ((nl > 0) & (nv > 0))[..., None]
    return np.where(live, spec, 0.0)


# ---------------------------------------------------------------------------
# Split-sum LUT

@dataclass
class BrdfLut:
    """values[i, j] = (F1, F2) at cell centers cos_nv=(i+.5)/res, rho=(j+.5)/res."""

    values: np.ndarray  # (res, res, 2) float32

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or v.shape[0] != v.shape[1] or v.shape[2] != 2:
            raise ValueError(f"LUT must be (res, res, 2), got {v.shape}")
        self.values = v

    @property
    def resolution(self) -> int:
        return self.values.shape[0]


def _stratified_unit_pairs(n: int, gen) -> tuple[np.ndarray, np.ndarray]:
    """n jittered samples of [0,1)^2; full 2-D grid when n is a square."""
    side = int(round(np.sqrt(n)))
    if side * side == n:
        i, j = np.divmod(np.arange(n), side)
        return (i + gen.random(n)) / side, (j + gen.random(n)) / side
    return (np.arange(n) + gen.random(n)) / n, gen.random(n)


def integrate_brdf_cell(cos_v: float, rho: float, n_samples: int, rng) -> tuple[float, float]:
    """Monte Carlo estimate of the split integral halves (F1, F2) at one cell.

    Half vectors come from the distribution of visible normals seen from the
    view direction, so each sample's full weight is G2 / G1(v) in [0, 1] and
    the estimates obey F1, F2 >= 0 and F1 + F2 <= 1 at any sample count. The
    weight splits into the halves by the Schlick interpolant (1-<v,h>)^5.
    """
    gen = _as_rng(rng)
    xi1, xi2 = _stratified_unit_pairs(n_samples, gen)
    v = np.array([np.sqrt(max(0.0, 1.0 - cos_v * cos_v)), 0.0, cos_v])

    # stretch the view into the unit-roughness configuration and build a
    # frame around it; a cosine disk sample warped toward the view's
    # tangent plane projects onto exactly the visible half vectors
    vs = np.array([rho * v[0], 0.0, v[2]])
    vs /= np.linalg.norm(vs)
    if vs[2] < 0.999999:
        t1 = np.array([-vs[1], vs[0], 0.0]) / np.hypot(vs[0], vs[1])
    else:
        t1 = np.array([1.0, 0.0, 0.0])
    t2 = np.cross(vs, t1)
    r = np.sqrt(xi1)
    phi = 2.0 * np.pi * xi2
    p1 = r * np.cos(phi)
    p2 = r * np.sin(phi)
    s = 0.5 * (1.0 + vs[2])
    p2 = (1.0 - s) * np.sqrt(np.maximum(0.0, 1.0 - p1 * p1)) + s * p2
    pz = np.sqrt(np.maximum(0.0, 1.0 - p1 * p1 - p2 * p2))
    nh = p1[:, None] * t1 + p2[:, None] * t2 + pz[:, None] * vs
    h = np.stack(
        [rho * nh[:, 0], rho * nh[:, 1], np.maximum(nh[:, 2], 1e-12)], axis=1
    )
    h /= np.linalg.norm(h, axis=1, keepdims=True)

    vh = h @ v
    l = 2.0 * vh[:, None] * h - v[None, :]
    nl = l[:, 2]

    g1_v = float(smith_g2(cos_v, 1.0, rho))
    w = np.where(nl > 0, smith_g2(cos_v, nl, rho) / max(g1_v, 1e-12), 0.0)
    fc = np.power(1.0 - np.clip(vh, 0.0, 1.0), 5.0)
    f1 = float(np.mean((1.0 - fc) * w))
    f2 = float(np.mean(fc * w))
    return f1, f2


def bake_brdf_lut(resolution: int = 64, samples_per_cell: int = 1024, rng: RngStream | None = None) -> BrdfLut:
    """Bake the (cos_nv, rho) table; per-cell child RNG streams keep the
    result independent of evaluation order. Estimates are clipped to the
    physical [0, 1] range."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    if samples_per_cell < 256:
        raise ValueError("samples_per_cell must be >= 256")
    if rng is None:
        rng = RngStream(0)
    values = np.empty((resolution, resolution, 2), dtype=np.float32)
    for i in range(resolution):
        cos_v = (i + 0.5) / resolution
        for j in range(resolution):
            rho = (j + 0.5) / resolution
            f1, f2 = integrate_brdf_cell(cos_v, rho, samples_per_cell, rng.child(i * resolution + j))
            values[i, j, 0] = min(max(f1, 0.0), 1.0)
            values[i, j, 1] = min(max(f2, 0.0), 1.0)
    return BrdfLut(values)


def lookup_lut(lut: BrdfLut, cos_nv, rho) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear (F1, F2) lookup; queries clamp to the tabulated cell centers."""
    res = lut.resolution
    x = np.clip(np.asarray(cos_nv, dtype=np.float64) * res - 0.5, 0.0, res - 1.0)
    y = np.clip(np.asarray(rho, dtype=np.float64) * res - 0.5, 0.0, res - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, res - 1)
    y1 = np.minimum(y0 + 1, res - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    v = lut.values.astype(np.float64)
    top = v[x0, y0] * (1 - fy) + v[x0, y1] * fy
    bot = v[x1, y0] * (1 - fy) + v[x1, y1] * fy
    out = top * (1 - fx) + bot * fx
    return out[..., 0], out[..., 1]


def save_lut(lut: BrdfLut, path) -> None:
    with open(path, "wb") as f:
        f.write(LUT_MAGIC)
        f.write(struct.pack("<I", lut.resolution))
        f.write(lut.values.astype("<f4").tobytes())


def load_lut(path) -> BrdfLut:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(LUT_MAGIC)] != LUT_MAGIC:
        raise ValueError("not a LUT file (bad magic)")
    (res,) = struct.unpack_from("<I", raw, len(LUT_MAGIC))
    body = raw[len(LUT_MAGIC) + 4 :]
    expect = res * res * 2 * 4
    if len(body) != expect:
        raise ValueError(f"LUT payload is {len(body)} bytes, expected {expect}")
    values = np.frombuffer(body, dtype="<f4").reshape(res, res, 2)
    return BrdfLut(values.copy())
