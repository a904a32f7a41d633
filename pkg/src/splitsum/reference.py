"""Brute-force reference reflectance: unfactored Monte Carlo integration of
the full microfacet + diffuse model against the environment.

Diffuse uses cosine-weighted hemisphere sampling (the pi/cos pdf cancels
against the Lambert term), specular importance-samples GGX half vectors, so
each sample contributes F G <v,h> / (<n,v> <n,h>) times the incoming
radiance. The Fresnel chain (F0, roughness-adjusted F, k_d) is the same one
split-sum shading uses, so the two paths differ only by the split-sum
factorization itself.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .brdf import diffuse_weight, fresnel_f0, fresnel_roughness, smith_g2
from .envmap import RadianceMap, sample_bilinear
from .geometry import Bvh, SurfacePoint, build_bvh, occluded
from .sampling import RHO_MIN, RngStream, build_onb, cos_hemisphere
from .shading import Camera, Scene, camera_rays


def _sample_ggx_half_vectors(n, rho: float, count: int, gen) -> np.ndarray:
    """Half vectors about n distributed as D(h) cos(h, n)."""
    xi1 = gen.random(count)
    xi2 = gen.random(count)
    a2 = rho * rho
    cos_h = np.sqrt((1.0 - xi1) / np.maximum(1.0 + (a2 - 1.0) * xi1, 1e-12))
    sin_h = np.sqrt(np.maximum(0.0, 1.0 - cos_h * cos_h))
    phi = 2.0 * np.pi * xi2
    local = np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h], axis=1)
    t, b, nn = build_onb(np.asarray(n, dtype=np.float64))
    return local[:, :1] * t + local[:, 1:2] * b + local[:, 2:] * nn


def mc_reflectance(
    point: SurfacePoint,
    w_o,
    env: RadianceMap,
    bvh: Bvh | None = None,
    n_samples: int = 1024,
    rng: RngStream | None = None,
    mode: str = "full",
    t_min: float | None = None,
) -> np.ndarray:
    """Outgoing radiance toward w_o by direct Monte Carlo.

    bvh None means no visibility term (V == 1); mode is "full", "diffuse",
    or "specular". Back-facing views return zero.
    """
    if mode not in ("full", "diffuse", "specular"):
        raise ValueError(f"unknown mode {mode!r}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng or RngStream(0)
    w_o = np.asarray(w_o, dtype=np.float64)
    n = point.normal
    mat = point.material
    cos_nv = float(n @ w_o)
    if cos_nv <= 0.0:
        return np.zeros(3)
    rho = float(np.clip(mat.roughness, RHO_MIN, 1.0))
    if t_min is None:
        t_min = bvh.mesh.default_t_min() if bvh is not None else 1e-6

    f0 = fresnel_f0(mat.metalness, mat.albedo)
    f_r = fresnel_roughness(f0, rho, cos_nv)
    k_d = diffuse_weight(mat.metalness, f_r)

    out = np.zeros(3)
    if mode in ("full", "diffuse"):
        dirs, _ = cos_hemisphere(n, rng.child(0), n_samples)
        radiance = sample_bilinear(env, dirs)
        if bvh is not None:
            vis = np.array(
                [0.0 if occluded(bvh, point.position, d, t_min) else 1.0 for d in dirs]
            )
            radiance = radiance * vis[:, None]
        out = out + k_d * mat.albedo * radiance.mean(axis=0)

    if mode in ("full", "specular"):
        gen = rng.child(1).gen
        h = _sample_ggx_half_vectors(n, rho, n_samples, gen)
        vh = h @ w_o
        w_i = 2.0 * vh[:, None] * h - w_o[None, :]
        nl = w_i @ n
        nh = np.clip(h @ n, 1e-12, 1.0)
        ok = (nl > 0.0) & (vh > 0.0)
        g = smith_g2(cos_nv, nl, rho)
        weight = np.where(ok, g * vh / (nh * cos_nv), 0.0)
        fres = f0 + (1.0 - f0) * np.power(1.0 - np.clip(vh, 0.0, 1.0), 5.0)[:, None]
        radiance = sample_bilinear(env, w_i)
        if bvh is not None:
            vis = np.array(
                [
                    0.0 if not ok[i] or occluded(bvh, point.position, w_i[i], t_min) else 1.0
                    for i in range(n_samples)
                ]
            )
            radiance = radiance * vis[:, None]
        out = out + (fres * radiance * weight[:, None]).mean(axis=0)
    return out


def render_reference(
    scene: Scene,
    camera: Camera,
    env: RadianceMap,
    n_per_pixel: int = 1024,
    seed: int = 0,
    mode: str = "full",
    background: str = "env",
    self_occlusion: bool = False,
    threads: int = 1,
) -> RadianceMap:
    """Reference render: per-pixel mc_reflectance at the primary hit.

    Misses reproduce the environment lookup exactly (or black). Per-pixel
    child RNG streams keyed by pixel index keep the image independent of
    `threads` and reproducible for a fixed seed.
    """
    if background not in ("env", "black"):
        raise ValueError(f"unknown background {background!r}")
    from .geometry import Material  # local import to avoid cycle noise

    origin, dirs = camera_rays(camera)
    h, w = camera.height, camera.width
    flat = dirs.reshape(-1, 3)
    bvh = build_bvh(scene.mesh)
    vis_bvh = bvh if self_occlusion else None
    root = RngStream(seed)
    out = np.zeros((h * w, 3))

    def run_rows(lo_row: int, hi_row: int):
        from .shading import _pixel_materials

        lo, hi = lo_row * w, hi_row * w
        for i in range(lo, hi):
            d = flat[i]
            hit = bvh.intersect(origin, d)
            if hit is None:
                if background == "env":
                    out[i] = sample_bilinear(env, d)
                continue
            albedo, metal, rough = _pixel_materials(
                scene, np.array([hit.tri_index]), hit.bary[None, :]
            )
            point = SurfacePoint(
                position=hit.position,
                normal=hit.normal,
                material=Material(
                    albedo=albedo[0], metalness=float(metal[0]), roughness=float(rough[0])
                ),
            )
            out[i] = mc_reflectance(
                point, -d, env, vis_bvh, n_per_pixel, root.child(i), mode
            )

    threads = max(1, int(threads))
    if threads == 1:
        run_rows(0, h)
    else:
        bounds = np.linspace(0, h, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(run_rows, int(a), int(b))
                for a, b in zip(bounds[:-1], bounds[1:])
                if b > a
            ]
            for f in futures:
                f.result()
    return RadianceMap(out.reshape(h, w, 3).astype(np.float32))
