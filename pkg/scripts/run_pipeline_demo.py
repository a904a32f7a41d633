#!/usr/bin/env python3
"""End-to-end pipeline demo on a synthetic scene.

Generates a small workspace (environment map, UV-sphere mesh, scene config),
then drives every CLI stage in order:

    bake-lut        split-sum BRDF table
    prefilter       pre-integrated environment pyramid
    fit-illum       neural illumination field on the same environment
    bake-occlusion  MC occlusion factors at mesh surface points
    render          split-sum images from all three illumination sources
    render --reference  brute-force oracle image
    compare         PSNR of each split-sum image against the oracle

Everything goes through splitsum.cli.main, so this doubles as a smoke test of
the command surface. Runtime is a couple of minutes at the default settings;
--fast trims sample counts for a quick pass.

Run: python3 scripts/run_pipeline_demo.py [--out demo_out] [--fast]
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from splitsum.cli import main as cli
from splitsum.envmap import RadianceMap, save_hdr, texel_center_dirs
from splitsum.geometry import save_obj, uv_sphere


def make_env(width=64, seed=0) -> RadianceMap:
    """Sky-like test environment: soft base plus a few spherical Gaussians."""
    gen = np.random.default_rng(seed)
    dirs = texel_center_dirs(RadianceMap(np.zeros((width // 2, width, 3), np.float32)))
    texels = np.full((width // 2, width, 3), 0.15)
    for _ in range(4):
        axis, _ = np.linalg.qr(gen.normal(size=(3, 3)))
        center = axis[:, 0]
        sharp = gen.uniform(3.0, 30.0)
        color = gen.uniform(0.2, 3.0, size=3)
        texels += np.exp(sharp * (dirs @ center - 1.0))[..., None] * color
    return RadianceMap(texels.astype(np.float32))


def run(argv: list[str]) -> None:
    print("$ splitsum " + " ".join(argv), file=sys.stderr)
    code = cli(argv)
    if code != 0:
        raise SystemExit(f"step failed with exit code {code}: {argv}")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_out", help="workspace directory")
    ap.add_argument("--fast", action="store_true", help="smaller sample counts")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = "96" if args.fast else "160"
    spp = "128" if args.fast else "512"
    fit_steps = "300" if args.fast else "1200"
    pyr_samples = "1024" if args.fast else "4096"

    save_hdr(make_env(), out / "env.hdr")
    save_obj(uv_sphere(n_theta=32, n_phi=64), out / "sphere.obj")
    (out / "scene.json").write_text(json.dumps({
        "mesh": "sphere.obj",
        "env": "env.hdr",
        "material": {"albedo": [0.85, 0.55, 0.35], "metalness": 0.0, "roughness": 0.35},
        "camera": {
            "position": [0.0, 0.6, 3.0],
            "look_at": [0.0, 0.0, 0.0],
            "width": int(size),
            "height": int(size),
            "vfov_deg": 45.0,
        },
    }, indent=2))
    (out / "train.json").write_text(json.dumps({
        "steps": int(fit_steps), "recon_batch": 192, "reg_batch": 24,
        "light_samples": 128, "hidden_layers": 3, "hidden_width": 48,
    }, indent=2))

    run(["bake-lut", str(out / "brdf.lut"), "--res", "64", "--samples", "1024"])
    run(["prefilter", str(out / "env.hdr"), str(out / "pyr"),
         "--levels", "6", "--samples", pyr_samples])
    run(["fit-illum", str(out / "env.hdr"), str(out / "field.illf"),
         "--config", str(out / "train.json"), "--log-every", "100"])
    run(["bake-occlusion", str(out / "sphere.obj"), str(out / "env.hdr"),
         str(out / "sphere.occl"), "--points", "256", "--samples", "64"])

    common = [str(out / "scene.json"), "--lut", str(out / "brdf.lut")]
    run(["render", *common[:1], str(out / "ref.hdr"), "--reference", "--spp", spp])
    run(["render", *common, str(out / "mc.hdr"), "--illum", "mc"])
    run(["render", *common, str(out / "pyramid.hdr"),
         "--illum", "pyramid", "--pyramid", str(out / "pyr")])
    run(["render", *common, str(out / "field.hdr"),
         "--illum", "field", "--field", str(out / "field.illf")])
    run(["render", *common, str(out / "beauty.png"),
         "--illum", "pyramid", "--pyramid", str(out / "pyr"),
         "--occlusion", "baked", "--occlusion-table", str(out / "sphere.occl"),
         "--exposure", "1.2"])

    for name in ("mc", "pyramid", "field"):
        print(f"--- {name} vs reference ---")
        run(["compare", str(out / "ref.hdr"), str(out / f"{name}.hdr")])

    print(f"artifacts in {out}/ (beauty.png is the tonemapped occluded render)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
