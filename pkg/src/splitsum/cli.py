"""Command-line surface: baking, fitting, rendering, and image comparison.

Subcommands
    prefilter       bake an environment pyramid of pre-integrated levels
    bake-lut        bake the split-sum BRDF lookup table
    fit-illum       train an illumination field on an environment map
    bake-occlusion  estimate occlusion factors at surface sample points
    render          split-sum or brute-force reference render of a scene
    compare         PSNR report between two radiance images

Exit codes: 0 success, 1 validation error (bad flags, config semantics,
malformed baked artifacts), 2 I/O error (unreadable files, corrupt HDR/OBJ
inputs). Logs go to standard error; only `compare` prints its report to
standard output, every other command writes data to files. Outputs are
written to a temporary name and renamed into place, so a failed run never
leaves a partial artifact.

Scene configuration is a JSON file; relative paths resolve against the
config file's directory:

    {
      "mesh": "scene.obj",
      "env": "env.hdr",
      "material": {"albedo": [0.8, 0.8, 0.8], "metalness": 0.0,
                   "roughness": 0.4},
      "camera": {"position": [0, 0, 3], "look_at": [0, 0, 0],
                 "up": [0, 1, 0], "vfov_deg": 45,
                 "width": 128, "height": 128},
      "illum": "mc",          // optional default, overridden by --illum
      "occlusion": "none"     // optional default, overridden by --occlusion
    }

`material` may instead be {"table": "materials.json"} pointing at per-vertex
arrays {"albedo": [[r,g,b], ...], "metalness": [...], "roughness": [...]}.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager, suppress
from pathlib import Path

import numpy as np

from .brdf import bake_brdf_lut, load_lut, save_lut
from .envmap import RadianceMap, load_hdr, save_hdr, save_png_srgb
from .errors import DegenerateEstimatorError, DivergenceError, HdrError, ObjParseError
from .geometry import Material, MaterialTable, build_bvh, load_obj, sample_surface
from .illum_field import TrainConfig, export_envmap, fit, load_field, save_field
from .occlusion import load_occlusion_table, mc_occlusion, save_occlusion_table
from .prefilter import bake_pyramid, load_pyramid, save_pyramid
from .reference import render_reference
from .sampling import RngStream
from .shading import Camera, IllumSource, Scene, render

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# Atomic output helpers: write to a sibling temp name, rename into place.

@contextmanager
def _atomic_file(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(
        dir=path.parent, prefix=path.name + ".", suffix=".tmp" + path.suffix
    )
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with suppress(OSError):
            os.unlink(tmp)
        raise


@contextmanager
def _atomic_dir(path):
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise ValueError(f"output directory {path} exists and is not empty")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=path.name + "."))
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _write_field_atomic(field, out_path) -> None:
    """save_field emits <path> plus a <path>.json sidecar; rename both."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_path.parent, prefix=out_path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        save_field(field, tmp)
        os.replace(tmp + ".json", str(out_path) + ".json")
        os.replace(tmp, out_path)
    except BaseException:
        for leftover in (tmp, tmp + ".json"):
            with suppress(OSError):
                os.unlink(leftover)
        raise


# ---------------------------------------------------------------------------
# Image metrics.

def channel_scales(a, b) -> np.ndarray:
    """Per-channel least-squares scalars s_c minimizing ||a_c - s_c b_c||^2."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise ValueError("channel_scales requires equal shapes")
    num = (a * b).sum(axis=0)
    den = (b * b).sum(axis=0)
    return np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 1.0)


def psnr(a, b, peak: float | None = None) -> float:
    """10 log10(peak^2 / MSE); peak defaults to the max channel of a.

    Identical images report infinity.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr requires equal shapes")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    if peak is None:
        peak = float(a.max())
    if peak <= 0.0:
        return -math.inf
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# Scene configuration.

def _resolve(base: Path, p) -> Path:
    pp = Path(p)
    return pp if pp.is_absolute() else base / pp


def _load_material(spec, base: Path, vertex_count: int):
    if not isinstance(spec, dict):
        raise ValueError("scene config: 'material' must be an object")
    if "table" in spec:
        raw = json.loads(_resolve(base, spec["table"]).read_text())
        table = MaterialTable(
            albedo=np.asarray(raw["albedo"], dtype=np.float64),
            metalness=np.asarray(raw["metalness"], dtype=np.float64),
            roughness=np.asarray(raw["roughness"], dtype=np.float64),
        )
        if len(table.albedo) != vertex_count:
            raise ValueError(
                f"material table rows ({len(table.albedo)}) != mesh vertices ({vertex_count})"
            )
        return table
    missing = {"albedo", "metalness", "roughness"} - spec.keys()
    if missing:
        raise ValueError(f"scene config: material missing keys {sorted(missing)}")
    return Material(
        albedo=np.asarray(spec["albedo"], dtype=np.float64),
        metalness=float(spec["metalness"]),
        roughness=float(spec["roughness"]),
    )


def load_scene_config(path) -> tuple[Scene, Camera, dict]:
    """Parse a scene JSON file into (Scene, Camera, raw config dict)."""
    path = Path(path)
    cfg = json.loads(path.read_text())
    if not isinstance(cfg, dict):
        raise ValueError("scene config must be a JSON object")
    missing = {"mesh", "env", "material", "camera"} - cfg.keys()
    if missing:
        raise ValueError(f"scene config missing keys {sorted(missing)}")
    base = path.parent
    mesh = load_obj(_resolve(base, cfg["mesh"]))
    env = load_hdr(_resolve(base, cfg["env"]))
    material = _load_material(cfg["material"], base, len(mesh.vertices))
    cam_cfg = dict(cfg["camera"])
    unknown = cam_cfg.keys() - {"position", "look_at", "up", "vfov_deg", "width", "height"}
    if unknown:
        raise ValueError(f"scene config: unknown camera keys {sorted(unknown)}")
    camera = Camera(**cam_cfg)
    return Scene(mesh=mesh, material=material, env=env), camera, cfg


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_prefilter(args) -> None:
    env = load_hdr(args.env)
    pyr = bake_pyramid(env, args.levels, args.samples, RngStream(args.seed))
    with _atomic_dir(args.out_dir) as tmp:
        save_pyramid(pyr, tmp)
    _log(
        f"wrote {args.levels}-level pyramid ({env.width}x{env.height}, "
        f"{args.samples} samples/texel) to {args.out_dir}"
    )


def cmd_bake_lut(args) -> None:
    lut = bake_brdf_lut(args.res, args.samples, RngStream(args.seed))
    with _atomic_file(args.out) as tmp:
        save_lut(lut, tmp)
    _log(f"wrote {args.res}x{args.res} BRDF table to {args.out}")


def cmd_fit_illum(args) -> None:
    env = load_hdr(args.env)
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        if not isinstance(overrides, dict):
            raise ValueError("fit config must be a JSON object")
        known = {f.name for f in TrainConfig.__dataclass_fields__.values()}
        unknown = overrides.keys() - known
        if unknown:
            raise ValueError(f"fit config: unknown keys {sorted(unknown)}")
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    cfg = TrainConfig(**overrides)

    def log(step, loss, rec, reg, lr):
        if step % args.log_every == 0 or step == cfg.steps - 1:
            _log(
                f"step {step:5d}  loss {loss:.6f}  recon {rec:.6f}  "
                f"estimator {reg:.6f}  lr {lr:.3e}"
            )

    field, history = fit(env, cfg, log)
    _write_field_atomic(field, args.out)
    if env.is_equirect and env.width % 2 == 0:
        recon = export_envmap(field, 0.0, env.width)
        value = psnr(env.texels, recon.texels)
        _log(f"rho=0 reconstruction PSNR: {value:.2f} dB")
    _log(
        f"wrote field ({cfg.hidden_layers}x{cfg.hidden_width} hidden, "
        f"{cfg.steps} steps, final loss {history[-1, 0]:.6f}) to {args.out}"
    )


def cmd_bake_occlusion(args) -> None:
    mesh = load_obj(args.mesh)
    env = load_hdr(args.env)
    if args.points < 1:
        raise ValueError("--points must be >= 1")
    root = RngStream(args.seed)
    points = sample_surface(mesh, args.points, root.child(0))
    bvh = build_bvh(mesh)
    point_streams = root.child(1)
    estimates = [
        mc_occlusion(
            p.position, p.normal, env, bvh, args.rho, args.samples, point_streams.child(i)
        )
        for i, p in enumerate(points)
    ]
    with _atomic_file(args.out) as tmp:
        save_occlusion_table([p.position for p in points], estimates, tmp)
    _log(
        f"wrote occlusion table ({args.points} points, {args.samples} samples, "
        f"rho={args.rho}) to {args.out}"
    )


def _build_illum(kind: str, args, env: RadianceMap) -> IllumSource:
    if kind == "pyramid":
        if not args.pyramid:
            raise ValueError("--illum pyramid requires --pyramid DIR")
        return IllumSource.from_pyramid(load_pyramid(args.pyramid))
    if kind == "field":
        if not args.field:
            raise ValueError("--illum field requires --field PATH")
        return IllumSource.from_field(load_field(args.field))
    if kind == "mc":
        return IllumSource.from_mc(env, args.mc_samples, seed=args.seed)
    raise ValueError(f"unknown illumination source {kind!r}")


def _save_image(img: RadianceMap, path, exposure: float) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".hdr":
        with _atomic_file(path) as tmp:
            save_hdr(img, tmp)
    elif suffix == ".png":
        with _atomic_file(path) as tmp:
            save_png_srgb(img, tmp, exposure)
    else:
        raise ValueError(f"unsupported output format {suffix!r} (use .hdr or .png)")


def cmd_render(args) -> None:
    scene, camera, cfg = load_scene_config(args.scene)
    if args.reference:
        img = render_reference(
            scene,
            camera,
            scene.env,
            n_per_pixel=args.spp,
            seed=args.seed,
            mode=args.mode,
            background=args.background,
            self_occlusion=args.self_occlusion,
            threads=args.threads,
        )
        _save_image(img, args.out, args.exposure)
        _log(f"wrote reference render ({args.spp} spp) to {args.out}")
        return
    illum_kind = args.illum or cfg.get("illum", "mc")
    occlusion = args.occlusion or cfg.get("occlusion", "none")
    illum = _build_illum(illum_kind, args, scene.env)
    lut = load_lut(args.lut) if args.lut else bake_brdf_lut(32, 1024, RngStream(7))
    table = None
    if occlusion == "baked":
        if not args.occlusion_table:
            raise ValueError("--occlusion baked requires --occlusion-table PATH")
        table = load_occlusion_table(args.occlusion_table)
    img = render(
        scene,
        camera,
        illum,
        lut,
        occlusion=occlusion,
        seed=args.seed,
        background=args.background,
        mode=args.mode,
        occlusion_samples=args.occlusion_samples,
        occlusion_table=table,
        threads=args.threads,
    )
    _save_image(img, args.out, args.exposure)
    _log(f"wrote split-sum render (illum={illum_kind}, occlusion={occlusion}) to {args.out}")


def cmd_compare(args) -> None:
    a = load_hdr(args.a)
    b = load_hdr(args.b)
    if a.texels.shape != b.texels.shape:
        raise ValueError(
            f"image dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    bt = b.texels.astype(np.float64)
    if args.channel_scale:
        scales = channel_scales(a.texels, b.texels)
        bt = bt * scales
        print(f"scales: {scales[0]:.6f} {scales[1]:.6f} {scales[2]:.6f}")
    value = psnr(a.texels, bt)
    print(f"psnr_db: {'inf' if math.isinf(value) and value > 0 else f'{value:.4f}'}")


# ---------------------------------------------------------------------------
# Parser.

def _add_common(p: argparse.ArgumentParser, seed_default=0) -> None:
    p.add_argument("--seed", type=int, default=seed_default, help="RNG seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitsum",
        description="Split-sum image-based lighting: bake, fit, render, compare.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prefilter", help="bake a pre-integrated environment pyramid")
    p.add_argument("env", help="input .hdr environment (equirectangular 2:1)")
    p.add_argument("out_dir", help="output directory for level_XX.hdr + pyramid.json")
    p.add_argument("--levels", type=int, default=6, help="roughness levels (default 6)")
    p.add_argument("--samples", type=int, default=8192, help="shared samples per texel")
    _add_common(p)
    p.set_defaults(func=cmd_prefilter)

    p = sub.add_parser("bake-lut", help="bake the split-sum BRDF lookup table")
    p.add_argument("out", help="output .lut path")
    p.add_argument("--res", type=int, default=64, help="table resolution (default 64)")
    p.add_argument("--samples", type=int, default=1024, help="samples per cell")
    _add_common(p)
    p.set_defaults(func=cmd_bake_lut)

    p = sub.add_parser("fit-illum", help="train an illumination field on an environment")
    p.add_argument("env", help="input .hdr environment (equirectangular 2:1)")
    p.add_argument("out", help="output .illf path (plus .illf.json sidecar)")
    p.add_argument("--config", help="JSON file overriding training-config fields")
    p.add_argument("--steps", type=int, default=None, help="override step count")
    p.add_argument("--log-every", type=int, default=100, help="loss log cadence")
    p.add_argument("--seed", type=int, default=None, help="override RNG seed")
    p.set_defaults(func=cmd_fit_illum)

    p = sub.add_parser("bake-occlusion", help="estimate occlusion factors on a mesh")
    p.add_argument("mesh", help="input .obj mesh")
    p.add_argument("env", help="input .hdr environment")
    p.add_argument("out", help="output .occl table path")
    p.add_argument("--samples", type=int, default=64, help="MC samples per point (default 64)")
    p.add_argument("--points", type=int, default=512, help="surface sample points")
    p.add_argument("--rho", type=float, default=0.5, help="specular-lobe roughness")
    _add_common(p)
    p.set_defaults(func=cmd_bake_occlusion)

    p = sub.add_parser("render", help="render a scene config to .hdr or .png")
    p.add_argument("scene", help="scene config JSON")
    p.add_argument("out", help="output image (.hdr linear or .png sRGB)")
    p.add_argument("--illum", choices=["pyramid", "field", "mc"], default=None)
    p.add_argument("--pyramid", help="pyramid directory for --illum pyramid")
    p.add_argument("--field", help=".illf path for --illum field")
    p.add_argument("--lut", help=".lut path (default: bake 32x32 in memory)")
    p.add_argument("--occlusion", choices=["none", "mc", "baked"], default=None)
    p.add_argument("--occlusion-table", help=".occl path for --occlusion baked")
    p.add_argument("--occlusion-samples", type=int, default=64)
    p.add_argument("--mc-samples", type=int, default=8192, help="--illum mc sample budget")
    p.add_argument("--reference", action="store_true", help="brute-force oracle instead")
    p.add_argument("--spp", type=int, default=1024, help="reference samples per pixel")
    p.add_argument(
        "--self-occlusion", action="store_true",
        help="trace visibility rays in the reference renderer",
    )
    p.add_argument("--mode", choices=["full", "diffuse", "specular"], default="full")
    p.add_argument("--background", choices=["env", "black"], default="env")
    p.add_argument("--exposure", type=float, default=1.0, help="PNG exposure multiplier")
    p.add_argument(
        "--threads", type=int, default=os.cpu_count() or 1,
        help="render threads (output is thread-count invariant)",
    )
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compare", help="PSNR report between two .hdr images")
    p.add_argument("a", help="reference image (sets the PSNR peak)")
    p.add_argument("b", help="test image")
    p.add_argument(
        "--channel-scale", action="store_true",
        help="apply per-channel least-squares scale to b first",
    )
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION
    try:
        args.func(args)
        return EXIT_OK
    except (OSError, HdrError, ObjParseError) as e:
        _log(f"error: {e}")
        return EXIT_IO
    except (ValueError, TypeError, DegenerateEstimatorError, DivergenceError) as e:
        _log(f"error: {e}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
