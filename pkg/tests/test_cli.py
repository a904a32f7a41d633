"""Command-line interface: subcommands run in-process through main(argv).

Contract under test: exit code 0 on success, 1 on validation errors
(arguments, config, malformed baked artifacts), 2 on I/O errors (missing or
corrupt input files); diagnostics go to stderr, data to files, and compare's
metrics to stdout; outputs are written atomically (no partial files left on
failure) and renders are bitwise reproducible for a fixed seed.
"""

import json

import numpy as np
import pytest

from splitsum import cli
from splitsum.envmap import load_hdr, save_hdr
from splitsum.geometry import save_obj, uv_sphere, quad
from splitsum.occlusion import load_occlusion_table
from splitsum.prefilter import load_pyramid

from _fixtures import blob_env, constant_env, smooth_env

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture
def workspace(tmp_path):
    """Environment HDR, sphere OBJ, and a scene config wired together."""
    env_path = tmp_path / "env.hdr"
    save_hdr(blob_env(width=32), env_path)
    mesh_path = tmp_path / "sphere.obj"
    save_obj(uv_sphere(n_theta=12, n_phi=24), mesh_path)
    scene = {
        "mesh": "sphere.obj",
        "env": "env.hdr",
        "material": {"albedo": [0.8, 0.8, 0.8], "metalness": 0.0, "roughness": 0.5},
        "camera": {
            "position": [0.0, 0.0, 3.0],
            "look_at": [0.0, 0.0, 0.0],
            "width": 16,
            "height": 16,
        },
    }
    scene_path = tmp_path / "scene.json"
    scene_path.write_text(json.dumps(scene))
    return tmp_path


# ---------------------------------------------------------------------------
# Exit-code contract

def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "prefilter" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    assert cli.main([]) == 1
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["render"]) == 1  # missing positionals


def test_missing_input_file_exits_two(tmp_path, capsys):
    out = tmp_path / "pyr"
    assert cli.main(["prefilter", str(tmp_path / "nope.hdr"), str(out)]) == 2
    assert not out.exists()
    assert "error:" in capsys.readouterr().err


def test_corrupt_hdr_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.hdr"
    bad.write_bytes(b"not an hdr at all")
    assert cli.main(["prefilter", str(bad), str(tmp_path / "pyr")]) == 2


def test_corrupt_obj_exits_two(tmp_path, workspace):
    bad = workspace / "bad.obj"
    bad.write_text("v 1 2\n")  # short vertex line
    cfg = json.loads((workspace / "scene.json").read_text())
    cfg["mesh"] = "bad.obj"
    (workspace / "scene2.json").write_text(json.dumps(cfg))
    out = workspace / "img.hdr"
    assert cli.main(["render", str(workspace / "scene2.json"), str(out)]) == 2
    assert not out.exists()


def test_validation_errors_exit_one(tmp_path, workspace):
    # invalid LUT resolution
    assert cli.main(["bake-lut", str(tmp_path / "t.lut"), "--res", "4"]) == 1
    # scene config missing keys
    (workspace / "broken.json").write_text(json.dumps({"mesh": "sphere.obj"}))
    assert cli.main(["render", str(workspace / "broken.json"), str(tmp_path / "x.hdr")]) == 1
    # unsupported output extension
    assert cli.main(["render", str(workspace / "scene.json"), str(tmp_path / "x.bmp")]) == 1


def test_malformed_baked_artifact_exits_one(tmp_path, workspace):
    bad_lut = tmp_path / "bad.lut"
    bad_lut.write_bytes(b"NOTLUT" + b"\0" * 32)
    code = cli.main(
        ["render", str(workspace / "scene.json"), str(tmp_path / "img.hdr"),
         "--lut", str(bad_lut)]
    )
    assert code == 1


# ---------------------------------------------------------------------------
# prefilter / bake-lut

def test_prefilter_writes_pyramid(tmp_path, capsys):
    env_path = tmp_path / "env.hdr"
    save_hdr(constant_env(1.0, width=16), env_path)
    out = tmp_path / "pyr"
    code = cli.main(
        ["prefilter", str(env_path), str(out), "--levels", "3", "--samples", "32"]
    )
    assert code == 0
    assert (out / "pyramid.json").exists()
    assert (out / "level_00.hdr").exists() and (out / "level_02.hdr").exists()
    pyr = load_pyramid(out)
    assert len(pyr.levels) == 3
    # constant env survives every level (estimator exactness + codec roundtrip)
    assert np.allclose(pyr.levels[2].texels, 1.0, rtol=1e-2)
    err = capsys.readouterr().err
    assert "pyramid" in err


def test_prefilter_refuses_nonempty_target(tmp_path):
    env_path = tmp_path / "env.hdr"
    save_hdr(constant_env(1.0, width=16), env_path)
    out = tmp_path / "pyr"
    out.mkdir()
    (out / "keep.txt").write_text("precious")
    code = cli.main(["prefilter", str(env_path), str(out), "--levels", "2", "--samples", "16"])
    assert code == 1
    assert (out / "keep.txt").read_text() == "precious"  # untouched


def test_bake_lut_file_size_and_determinism(tmp_path):
    a, b = tmp_path / "a.lut", tmp_path / "b.lut"
    assert cli.main(["bake-lut", str(a), "--res", "16", "--samples", "256"]) == 0
    assert cli.main(["bake-lut", str(b), "--res", "16", "--samples", "256"]) == 0
    assert a.stat().st_size == 10 + 2 * 4 * 16 * 16
    assert a.read_bytes() == b.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


# ---------------------------------------------------------------------------
# fit-illum

def test_fit_illum_trains_saves_and_logs(tmp_path, capsys):
    env_path = tmp_path / "env.hdr"
    save_hdr(blob_env(width=16), env_path)
    cfg = {
        "recon_batch": 64, "reg_batch": 8, "light_samples": 64,
        "hidden_layers": 2, "hidden_width": 16,
        "dir_frequencies": 4, "rough_frequencies": 2, "warmup_steps": 5,
    }
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "f.illf"
    code = cli.main(
        ["fit-illum", str(env_path), str(out), "--config", str(cfg_path),
         "--steps", "20", "--seed", "3", "--log-every", "5"]
    )
    assert code == 0
    assert out.exists() and (tmp_path / "f.illf.json").exists()
    captured = capsys.readouterr()
    assert captured.out == ""  # diagnostics belong on stderr
    assert "step " in captured.err
    assert "reconstruction PSNR" in captured.err
    sidecar = json.loads((tmp_path / "f.illf.json").read_text())
    assert sidecar["layer_dims"][0] == 4 + 2 * (3 * 4 + 2)


def test_fit_illum_rejects_unknown_config_keys(tmp_path):
    env_path = tmp_path / "env.hdr"
    save_hdr(blob_env(width=16), env_path)
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(json.dumps({"steps": 5, "momentum": 0.9}))
    code = cli.main(["fit-illum", str(env_path), str(tmp_path / "f.illf"), "--config", str(cfg_path)])
    assert code == 1
    assert not (tmp_path / "f.illf").exists()


# ---------------------------------------------------------------------------
# bake-occlusion

def test_bake_occlusion_flat_quad_is_unoccluded(tmp_path):
    mesh_path = tmp_path / "quad.obj"
    save_obj(quad((0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 0, 0)), mesh_path)
    env_path = tmp_path / "env.hdr"
    save_hdr(constant_env(1.0, width=16), env_path)
    out = tmp_path / "t.occl"
    code = cli.main(
        ["bake-occlusion", str(mesh_path), str(env_path), str(out),
         "--points", "8", "--samples", "16"]
    )
    assert code == 0
    pos, o_d, o_s = load_occlusion_table(out)
    assert pos.shape == (8, 3)
    # a lone flat plate never blocks its own upper hemisphere
    assert np.allclose(o_d, 1.0) and np.allclose(o_s, 1.0)


# ---------------------------------------------------------------------------
# render

def test_render_hdr_and_png(workspace):
    img_hdr = workspace / "out.hdr"
    code = cli.main(
        ["render", str(workspace / "scene.json"), str(img_hdr),
         "--illum", "mc", "--mc-samples", "128"]
    )
    assert code == 0
    img = load_hdr(img_hdr)
    assert img.texels.shape == (16, 16, 3)
    assert float(img.texels.sum()) > 0

    img_png = workspace / "out.png"
    code = cli.main(
        ["render", str(workspace / "scene.json"), str(img_png),
         "--illum", "mc", "--mc-samples", "128", "--exposure", "1.5"]
    )
    assert code == 0
    assert img_png.read_bytes()[:8] == PNG_MAGIC


def test_render_deterministic_and_thread_invariant(workspace):
    args = ["render", str(workspace / "scene.json"), None,
            "--illum", "mc", "--mc-samples", "64", "--seed", "9"]
    outs = []
    for name, threads in (("a.hdr", "1"), ("b.hdr", "1"), ("c.hdr", "4")):
        path = workspace / name
        argv = list(args)
        argv[2] = str(path)
        assert cli.main(argv + ["--threads", threads]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_render_reference_mode(workspace):
    out = workspace / "ref.hdr"
    code = cli.main(
        ["render", str(workspace / "scene.json"), str(out),
         "--reference", "--spp", "4", "--background", "black"]
    )
    assert code == 0
    img = load_hdr(out)
    assert np.all(img.texels[0, 0] == 0.0)  # black background corner


def test_render_pyramid_and_baked_occlusion_pipeline(workspace):
    env_path = workspace / "env.hdr"
    pyr_dir = workspace / "pyr"
    assert cli.main(
        ["prefilter", str(env_path), str(pyr_dir), "--levels", "3", "--samples", "64"]
    ) == 0
    occl_path = workspace / "t.occl"
    assert cli.main(
        ["bake-occlusion", str(workspace / "sphere.obj"), str(env_path),
         str(occl_path), "--points", "32", "--samples", "8"]
    ) == 0
    lut_path = workspace / "t.lut"
    assert cli.main(["bake-lut", str(lut_path), "--res", "16", "--samples", "256"]) == 0
    out = workspace / "full.hdr"
    code = cli.main(
        ["render", str(workspace / "scene.json"), str(out),
         "--illum", "pyramid", "--pyramid", str(pyr_dir),
         "--occlusion", "baked", "--occlusion-table", str(occl_path),
         "--lut", str(lut_path)]
    )
    assert code == 0
    assert load_hdr(out).texels.sum() > 0


def test_render_missing_backing_flags_exit_one(workspace):
    out = workspace / "x.hdr"
    assert cli.main(
        ["render", str(workspace / "scene.json"), str(out), "--illum", "pyramid"]
    ) == 1
    assert cli.main(
        ["render", str(workspace / "scene.json"), str(out), "--occlusion", "baked"]
    ) == 1
    assert not out.exists()


def test_scene_config_illum_default_used(workspace):
    cfg = json.loads((workspace / "scene.json").read_text())
    cfg["illum"] = "mc"
    cfg["occlusion"] = "none"
    (workspace / "scene3.json").write_text(json.dumps(cfg))
    out = workspace / "cfgdefault.hdr"
    assert cli.main(
        ["render", str(workspace / "scene3.json"), str(out), "--mc-samples", "64"]
    ) == 0
    assert out.exists()


def test_render_creates_missing_output_directories(workspace):
    out = workspace / "no" / "such" / "dir.hdr"
    code = cli.main(
        ["render", str(workspace / "scene.json"), str(out),
         "--illum", "mc", "--mc-samples", "64"]
    )
    assert code == 0
    assert out.exists()


def test_render_unwritable_output_exits_two(workspace):
    blocker = workspace / "blocker"
    blocker.write_text("a file, not a directory")
    out = blocker / "img.hdr"  # parent is a regular file
    code = cli.main(
        ["render", str(workspace / "scene.json"), str(out),
         "--illum", "mc", "--mc-samples", "64"]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# compare

def test_compare_identical_reports_inf(tmp_path, capsys):
    p = tmp_path / "i.hdr"
    save_hdr(smooth_env(), p)
    assert cli.main(["compare", str(p), str(p)]) == 0
    out = capsys.readouterr().out
    assert "psnr_db: inf" in out


def test_compare_scaled_images(tmp_path, capsys):
    env = smooth_env()
    a = tmp_path / "a.hdr"
    b = tmp_path / "b.hdr"
    save_hdr(env, a)
    from splitsum.envmap import RadianceMap

    save_hdr(RadianceMap(env.texels * 0.5), b)
    assert cli.main(["compare", str(a), str(b), "--channel-scale"]) == 0
    out = capsys.readouterr().out
    assert "scales: " in out
    scales = [float(x) for x in out.splitlines()[0].split()[1:]]
    assert np.allclose(scales, 2.0, rtol=1e-2)
    psnr_line = out.splitlines()[1]
    assert psnr_line.startswith("psnr_db: ")
    # scale-matched halves should report very high but finite-or-inf PSNR
    val = psnr_line.split()[1]
    assert val == "inf" or float(val) > 40.0


def test_compare_dimension_mismatch_exits_one(tmp_path):
    a = tmp_path / "a.hdr"
    b = tmp_path / "b.hdr"
    save_hdr(constant_env(1.0, width=16), a)
    save_hdr(constant_env(1.0, width=32), b)
    assert cli.main(["compare", str(a), str(b)]) == 1


def test_compare_noise_psnr_reasonable(tmp_path, capsys):
    env = smooth_env()
    rng = np.random.default_rng(0)
    noisy = env.texels + rng.normal(0, 0.01, env.texels.shape).astype(np.float32)
    noisy = np.clip(noisy, 0, None)
    a = tmp_path / "a.hdr"
    b = tmp_path / "b.hdr"
    save_hdr(env, a)
    from splitsum.envmap import RadianceMap

    save_hdr(RadianceMap(noisy), b)
    assert cli.main(["compare", str(a), str(b)]) == 0
    out = capsys.readouterr().out
    val = float(out.split("psnr_db: ")[1])
    assert 30.0 < val < 80.0
