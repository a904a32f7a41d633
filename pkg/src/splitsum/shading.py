"""Split-sum shading and the forward renderer.

Outgoing radiance factors into pre-integrated illumination times the
directional reflectance from the BRDF lookup table:

    L_s = g(w_r, rho) * (F * F1 + F2)        specular, w_r = reflect(view)
    L_d = g(n, 1) * k_d * albedo             diffuse
    L   = gamma(o_d * L_d + o_s * L_s)       with optional occlusion factors

g comes from any IllumSource backing: a baked pyramid, a trained field, or
direct Monte Carlo against the environment with a shared sample set.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .brdf import BrdfLut, diffuse_weight, fresnel_f0, fresnel_roughness, lookup_lut
from .envmap import RadianceMap, linear_to_srgb, sample_bilinear
from .geometry import Bvh, Material, MaterialTable, SurfacePoint, TriangleMesh, build_bvh
from .illum_field import IllumField
from .occlusion import mc_occlusion, nearest_table_lookup
from .prefilter import PrefilteredPyramid, draw_light_samples, lookup_pyramid, ratio_estimate_many
from .sampling import RHO_MIN, RngStream

_warn_counts = {"backfacing": 0}


def warn_counts() -> dict:
    return dict(_warn_counts)


def reset_warn_counts() -> None:
    for k in _warn_counts:
        _warn_counts[k] = 0


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = dc_field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    vfov_deg: float = 45.0
    width: int = 128
    height: int = 128

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if self.width < 1 or self.height < 1:
            raise ValueError("camera needs positive resolution")
        if not 0.0 < self.vfov_deg < 180.0:
            raise ValueError("vertical fov must be in (0, 180) degrees")


def camera_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Primary ray directions through pixel centers, (origin, dirs (h, w, 3))."""
    fwd = cam.look_at - cam.position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, cam.up)
    right = right / np.linalg.norm(right)
    upv = np.cross(right, fwd)
    tan = np.tan(np.radians(cam.vfov_deg) / 2.0)
    aspect = cam.width / cam.height
    px = (2.0 * (np.arange(cam.width) + 0.5) / cam.width - 1.0) * tan * aspect
    py = (1.0 - 2.0 * (np.arange(cam.height) + 0.5) / cam.height) * tan
    d = (
        fwd[None, None, :]
        + px[None, :, None] * right[None, None, :]
        + py[:, None, None] * upv[None, None, :]
    )
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return cam.position.copy(), d


class IllumSource:
    """Pre-integrated illumination g(direction, roughness) from one of three
    backings: pyramid lookup, field forward pass, or shared-sample MC."""

    def __init__(self, kind: str, *, pyramid=None, field=None, env=None, samples=None):
        self.kind = kind
        self.pyramid = pyramid
        self.field = field
        self.env = env
        self.samples = samples

    @classmethod
    def from_pyramid(cls, pyramid: PrefilteredPyramid) -> "IllumSource":
        return cls("pyramid", pyramid=pyramid)

    @classmethod
    def from_field(cls, field: IllumField) -> "IllumSource":
        return cls("field", field=field)

    @classmethod
    def from_mc(cls, env: RadianceMap, sample_budget: int = 8192, seed: int = 0) -> "IllumSource":
        samples = draw_light_samples(env, sample_budget, RngStream(seed))
        return cls("mc", env=env, samples=samples)

    def eval(self, dirs, rho) -> np.ndarray:
        dirs = np.asarray(dirs, dtype=np.float64)
        single = dirs.ndim == 1
        d = np.atleast_2d(dirs)
        r = np.broadcast_to(np.asarray(rho, dtype=np.float64), d.shape[0])
        if self.kind == "pyramid":
            out = lookup_pyramid(self.pyramid, d, r)
        elif self.kind == "field":
            out = self.field.forward(d, r)
        elif self.kind == "mc":
            out = np.empty((len(d), 3))
            sharp = r < RHO_MIN
            if sharp.any():
                out[sharp] = sample_bilinear(self.env, d[sharp])
            if (~sharp).any():
                ldirs, lrad = self.samples
                out[~sharp] = ratio_estimate_many(ldirs, lrad, d[~sharp], r[~sharp])
        else:
            raise ValueError(f"unknown illumination source {self.kind!r}")
        return out[0] if single else out


def shade_components(normals, w_os, albedo, metal, rho, illum: IllumSource, lut: BrdfLut):
    """Array shading core -> (diffuse, specular, live mask).

    Back-facing entries (cos(n, v) <= 0) are zeroed, masked out of `live`,
    and counted in the module warning counters.
    """
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    w_os = np.atleast_2d(np.asarray(w_os, dtype=np.float64))
    albedo = np.atleast_2d(np.asarray(albedo, dtype=np.float64))
    metal = np.broadcast_to(np.asarray(metal, dtype=np.float64), normals.shape[0])
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), normals.shape[0])
    rho_c = np.clip(rho, RHO_MIN, 1.0)

    cos_nv = np.sum(normals * w_os, axis=-1)
    live = cos_nv > 0.0
    n_back = int((~live).sum())
    if n_back:
        _warn_counts["backfacing"] += n_back

    f0 = fresnel_f0(metal, albedo)
    f_r = fresnel_roughness(f0, rho_c, np.clip(cos_nv, 0.0, 1.0))

    w_r = 2.0 * cos_nv[:, None] * normals - w_os
    w_r = w_r / np.maximum(np.linalg.norm(w_r, axis=-1, keepdims=True), 1e-12)
    f1, f2 = lookup_lut(lut, np.clip(cos_nv, 0.0, 1.0), rho_c)
    g_spec = illum.eval(w_r, rho_c)
    spec = g_spec * (f_r * f1[:, None] + f2[:, None])

    g_diff = illum.eval(normals, 1.0)
    k_d = diffuse_weight(metal, f_r)
    diff = g_diff * k_d * albedo

    live_col = live[:, None]
    return np.where(live_col, diff, 0.0), np.where(live_col, spec, 0.0), live


def shade_specular(point: SurfacePoint, w_o, illum: IllumSource, lut: BrdfLut) -> np.ndarray:
    """Split-sum specular radiance toward w_o; zero for back-facing views."""
    m = point.material
    _, spec, _ = shade_components(
        point.normal, w_o, m.albedo, m.metalness, m.roughness, illum, lut
    )
    return spec[0]


def shade_diffuse(point: SurfacePoint, illum: IllumSource, w_o) -> np.ndarray:
    """Pre-integrated diffuse radiance; w_o sets the Fresnel-weighted k_d."""
    m = point.material
    diff, _, _ = shade_components(
        point.normal, w_o, m.albedo, m.metalness, m.roughness, illum, lut=_UNIT_LUT
    )
    return diff[0]


# shade_diffuse never reads the LUT; a 2x2 placeholder keeps the core shared.
_UNIT_LUT = BrdfLut(np.zeros((2, 2, 2), dtype=np.float32))


def shade(point: SurfacePoint, w_o, illum: IllumSource, lut: BrdfLut, occlusion=None, srgb: bool = True) -> np.ndarray:
    """Full split-sum radiance with optional occlusion factors.

    occlusion is an OcclusionEstimate (or None for the unoccluded unit);
    srgb=True applies the display transfer, otherwise linear radiance.
    """
    m = point.material
    diff, spec, _ = shade_components(
        point.normal, w_o, m.albedo, m.metalness, m.roughness, illum, lut
    )
    o_d = np.ones(3) if occlusion is None else occlusion.o_d
    o_s = np.ones(3) if occlusion is None else occlusion.o_s
    out = o_d * diff[0] + o_s * spec[0]
    return linear_to_srgb(np.clip(out, 0.0, 1.0)) if srgb else out


# ---------------------------------------------------------------------------
# Renderer

@dataclass
class Scene:
    mesh: TriangleMesh
    material: Material | MaterialTable
    env: RadianceMap


def _pixel_materials(scene: Scene, tris, bary):
    if isinstance(scene.material, MaterialTable):
        vidx = scene.mesh.triangles[tris]
        albedo = np.einsum("nk,nkj->nj", bary, scene.material.albedo[vidx])
        metal = np.einsum("nk,nk->n", bary, scene.material.metalness[vidx])
        rough = np.einsum("nk,nk->n", bary, scene.material.roughness[vidx])
        return np.clip(albedo, 0, 1), np.clip(metal, 0, 1), np.clip(rough, 0, 1)
    m = scene.material
    n = len(tris)
    return (
        np.broadcast_to(m.albedo, (n, 3)),
        np.full(n, m.metalness),
        np.full(n, m.roughness),
    )


def render(
    scene: Scene,
    camera: Camera,
    illum: IllumSource,
    lut: BrdfLut,
    occlusion: str = "none",
    seed: int = 0,
    background: str = "env",
    mode: str = "full",
    occlusion_samples: int = 64,
    occlusion_table=None,
    threads: int = 1,
) -> RadianceMap:
    """One primary ray per pixel center; linear-radiance output image.

    occlusion: "none", "mc" (fresh per-hit estimates, per-pixel streams), or
    "baked" (nearest neighbor in a loaded table tuple). mode selects which
    reflectance terms contribute: "full", "diffuse", or "specular".
    Deterministic for a fixed seed, independent of `threads`.
    """
    if occlusion not in ("none", "mc", "baked"):
        raise ValueError(f"unknown occlusion mode {occlusion!r}")
    if mode not in ("full", "diffuse", "specular"):
        raise ValueError(f"unknown render mode {mode!r}")
    if background not in ("env", "black"):
        raise ValueError(f"unknown background {background!r}")
    if occlusion == "baked" and occlusion_table is None:
        raise ValueError("baked occlusion needs an occlusion_table")

    origin, dirs = camera_rays(camera)
    h, w = camera.height, camera.width
    flat_dirs = dirs.reshape(-1, 3)
    bvh = build_bvh(scene.mesh)
    root = RngStream(seed)
    out = np.zeros((h * w, 3))

    def run_rows(lo_row: int, hi_row: int):
        lo = lo_row * w
        hi = hi_row * w
        seg = flat_dirs[lo:hi]
        ts = np.full(len(seg), np.inf)
        tris = np.full(len(seg), -1, dtype=np.int64)
        normals = np.zeros((len(seg), 3))
        bary = np.zeros((len(seg), 3))
        for i, d in enumerate(seg):
            hit = bvh.intersect(origin, d)
            if hit is not None:
                ts[i] = hit.t
                tris[i] = hit.tri_index
                normals[i] = hit.normal
                bary[i] = hit.bary
        hit_mask = tris >= 0
        seg_out = np.zeros((len(seg), 3))
        if background == "env":
            miss = ~hit_mask
            if miss.any():
                seg_out[miss] = sample_bilinear(scene.env, seg[miss])
        if hit_mask.any():
            hi_idx = np.nonzero(hit_mask)[0]
            positions = origin[None, :] + ts[hi_idx, None] * seg[hi_idx]
            albedo, metal, rough = _pixel_materials(scene, tris[hi_idx], bary[hi_idx])
            w_o = -seg[hi_idx]
            diff, spec, live = shade_components(
                normals[hi_idx], w_o, albedo, metal, rough, illum, lut
            )
            if mode == "diffuse":
                spec = np.zeros_like(spec)
            elif mode == "specular":
                diff = np.zeros_like(diff)
            o_d = np.ones((len(hi_idx), 3))
            o_s = np.ones((len(hi_idx), 3))
            if occlusion == "mc":
                rho_c = np.clip(rough, RHO_MIN, 1.0)
                for k, gi in enumerate(hi_idx):
                    if not live[k]:
                        continue
                    est = mc_occlusion(
                        positions[k], normals[hi_idx][k], scene.env, bvh,
                        float(rho_c[k]), occlusion_samples, root.child(lo + int(gi)),
                    )
                    o_d[k] = est.o_d
                    o_s[k] = est.o_s
            elif occlusion == "baked":
                tbl_pos, tbl_d, tbl_s = occlusion_table
                o_d, o_s = nearest_table_lookup(tbl_pos, tbl_d, tbl_s, positions)
            seg_out[hi_idx] = o_d * diff + o_s * spec
        out[lo:hi] = seg_out

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
