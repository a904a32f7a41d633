"""Environment pre-integration: the shared-sample ratio estimator, diffuse
irradiance, and a roughness pyramid of pre-integrated maps.

The estimator for the pre-integrated illumination at (w_r, rho) is

    gbar = sum_i D(t_i, rho) L_i max(t_i, 0) / sum_i D(t_i, rho) max(t_i, 0)

over a shared set of uniform-sphere light samples, t_i = <dir_i, w_r>, with
the view-independent simplified GGX lobe D. Numerator and denominator share
the same samples, so a constant environment is reproduced exactly and the
estimate is a convex combination of observed radiances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envmap import (
    RadianceMap,
    load_hdr,
    sample_bilinear,
    save_hdr,
    texel_center_dirs,
    texel_solid_angles,
)
from .errors import DegenerateEstimatorError
from .sampling import RHO_MIN, RngStream, _simplified_ndf, uniform_sphere

PYRAMID_META = "pyramid.json"


def draw_light_samples(env: RadianceMap, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Shared light sample set: uniform-sphere dirs and their radiances."""
    if count < 1:
        raise ValueError("need at least one light sample")
    dirs, _ = uniform_sphere(rng, count)
    return dirs, sample_bilinear(env, dirs)


def ratio_estimate(light_dirs, light_radiance, w_r, rho: float) -> np.ndarray:
    """Core ratio estimator for a single query direction."""
    t = light_dirs @ np.asarray(w_r, dtype=np.float64)
    w = _simplified_ndf(t, rho) * np.maximum(t, 0.0)
    den = w.sum()
    if den <= 1e-12:
        raise DegenerateEstimatorError(
            "all light samples have zero weight for this query"
        )
    return (w @ light_radiance) / den


def ratio_estimate_many(light_dirs, light_radiance, w_rs, rhos) -> np.ndarray:
    """Vectorized ratio estimates for query dirs (m, 3) and roughness (m,)."""
    w_rs = np.atleast_2d(np.asarray(w_rs, dtype=np.float64))
    rhos = np.broadcast_to(np.asarray(rhos, dtype=np.float64), w_rs.shape[0])
    out = np.empty((w_rs.shape[0], 3))
    block = 256  # bounds the (block, n_samples) weight matrix
    for s in range(0, w_rs.shape[0], block):
        e = min(s + block, w_rs.shape[0])
        t = w_rs[s:e] @ light_dirs.T
        w = _simplified_ndf(t, rhos[s:e, None]) * np.maximum(t, 0.0)
        den = w.sum(axis=1)
        if np.any(den <= 1e-12):
            raise DegenerateEstimatorError(
                "all light samples have zero weight for some query"
            )
        out[s:e] = (w @ light_radiance) / den[:, None]
    return out


def mc_prefilter(env: RadianceMap, w_r, rho: float, light_samples) -> np.ndarray:
    """Pre-integrated illumination toward w_r at the given roughness.

    light_samples is the (dirs, radiance) pair from draw_light_samples.
    Below the roughness floor the lobe is a delta: returns the bilinear
    environment lookup exactly.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    if rho < RHO_MIN:
        return sample_bilinear(env, w_r)
    dirs, radiance = light_samples
    return ratio_estimate(dirs, radiance, w_r, rho)


def diffuse_irradiance(env: RadianceMap, n, method: str = "quadrature", light_samples=None) -> np.ndarray:
    """Cosine-weighted average radiance about n: (1/pi) integral(L <w,n>+ dw).

    method="quadrature" sums every texel with its solid angle (deterministic
    oracle); method="mc" evaluates the shared-sample ratio estimator at
    rho = 1, whose lobe is exactly the clamped cosine.
    """
    n = np.asarray(n, dtype=np.float64)
    if method == "quadrature":
        dirs = texel_center_dirs(env)
        cos = np.maximum(dirs @ n, 0.0)
        w = cos * texel_solid_angles(env)[:, None]
        return (w[..., None] * env.texels.astype(np.float64)).sum(axis=(0, 1)) / np.pi
    if method == "mc":
        if light_samples is None:
            raise ValueError("mc method needs light_samples")
        dirs, radiance = light_samples
        return ratio_estimate(dirs, radiance, n, 1.0)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Roughness pyramid

@dataclass
class PrefilteredPyramid:
    """Pre-integrated maps at increasing roughness; level 0 is the input."""

    rhos: np.ndarray  # (levels,) ascending, rhos[0] = 0, rhos[-1] = 1
    levels: list  # list[RadianceMap], equal resolution

    def __post_init__(self):
        self.rhos = np.asarray(self.rhos, dtype=np.float64)
        if len(self.rhos) != len(self.levels) or len(self.levels) < 2:
            raise ValueError("need one rho per level and at least two levels")
        if np.any(np.diff(self.rhos) <= 0):
            raise ValueError("rhos must be strictly increasing")


def bake_pyramid(env: RadianceMap, level_count: int = 6, samples_per_texel: int = 8192, rng: RngStream | None = None) -> PrefilteredPyramid:
    """Bake levels at rho_k = k/(level_count-1).

    Each texel draws its own shared sample set from a child stream keyed by
    texel index (order- and thread-invariant) and reuses it across levels.
    """
    if level_count < 2:
        raise ValueError("level_count must be >= 2")
    if samples_per_texel < 16:
        raise ValueError("samples_per_texel must be >= 16")
    if rng is None:
        rng = RngStream(0)
    rhos = np.linspace(0.0, 1.0, level_count)
    h, w = env.height, env.width
    dirs = texel_center_dirs(env).reshape(-1, 3)
    out = np.empty((level_count - 1, h * w, 3))
    for k, d in enumerate(dirs):
        ldirs, lrad = draw_light_samples(env, samples_per_texel, rng.child(k))
        t = ldirs @ d
        tp = np.maximum(t, 0.0)
        for j in range(1, level_count):
            wgt = _simplified_ndf(t, rhos[j]) * tp
            den = wgt.sum()
            if den <= 1e-12:
                raise DegenerateEstimatorError(f"degenerate texel {k} at level {j}")
            out[j - 1, k] = (wgt @ lrad) / den
    levels = [RadianceMap(env.texels.copy())]
    levels += [RadianceMap(out[j].reshape(h, w, 3)) for j in range(level_count - 1)]
    return PrefilteredPyramid(rhos=rhos, levels=levels)


def lookup_pyramid(pyr: PrefilteredPyramid, d, rho) -> np.ndarray:
    """Bilinear-in-space, linear-in-roughness lookup. rho clamps to [0, 1]."""
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), d.shape[0])
    rho = np.clip(rho, pyr.rhos[0], pyr.rhos[-1])
    j1 = np.clip(np.searchsorted(pyr.rhos, rho, side="right"), 1, len(pyr.rhos) - 1)
    j0 = j1 - 1
    span = pyr.rhos[j1] - pyr.rhos[j0]
    wgt = np.clip((rho - pyr.rhos[j0]) / span, 0.0, 1.0)
    stacked = np.stack([sample_bilinear(lv, d) for lv in pyr.levels])  # (L, m, 3)
    rows = np.arange(d.shape[0])
    out = stacked[j0, rows] * (1.0 - wgt)[:, None] + stacked[j1, rows] * wgt[:, None]
    return out[0] if single else out


def save_pyramid(pyr: PrefilteredPyramid, dir_path) -> None:
    """Write level_XX.hdr files plus a JSON metadata file."""
    p = Path(dir_path)
    p.mkdir(parents=True, exist_ok=True)
    for i, lv in enumerate(pyr.levels):
        save_hdr(lv, p / f"level_{i:02d}.hdr")
    meta = {"level_count": len(pyr.levels), "rhos": [float(r) for r in pyr.rhos]}
    (p / PYRAMID_META).write_text(json.dumps(meta, indent=2) + "\n")


def load_pyramid(dir_path) -> PrefilteredPyramid:
    p = Path(dir_path)
    meta = json.loads((p / PYRAMID_META).read_text())
    levels = [load_hdr(p / f"level_{i:02d}.hdr") for i in range(meta["level_count"])]
    return PrefilteredPyramid(rhos=np.asarray(meta["rhos"]), levels=levels)
