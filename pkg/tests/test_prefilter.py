"""Shared-sample ratio estimator, diffuse irradiance, and roughness pyramid."""

import numpy as np
import pytest

from splitsum.envmap import RadianceMap, sample_bilinear
from splitsum.errors import DegenerateEstimatorError
from splitsum.prefilter import (
    PrefilteredPyramid,
    bake_pyramid,
    diffuse_irradiance,
    draw_light_samples,
    load_pyramid,
    lookup_pyramid,
    mc_prefilter,
    ratio_estimate,
    ratio_estimate_many,
    save_pyramid,
)
from splitsum.sampling import RHO_MIN, RngStream, uniform_sphere

from _fixtures import bright_texel_env, constant_env, smooth_env

UP = np.array([0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# Ratio estimator

def test_ratio_estimator_exact_on_constant_environment():
    env = constant_env((0.3, 0.7, 1.9))
    stored = env.texels[0, 0].astype(np.float64)  # float32 rounding of the literal
    for seed in range(5):
        n = [1, 4, 33, 1024][seed % 4]
        dirs, rad = draw_light_samples(env, n, RngStream(seed))
        w_r, _ = uniform_sphere(RngStream(100 + seed), 1)
        w_r = w_r[0]
        if np.all(dirs @ w_r <= 0):
            continue  # degenerate draw; covered by its own test
        for rho in (0.05, 0.3, 1.0):
            got = ratio_estimate(dirs, rad, w_r, rho)
            assert np.allclose(got, stored, rtol=1e-12)


def test_ratio_estimator_single_sample_returns_its_radiance():
    env = smooth_env()
    dirs = np.array([[0.0, 1.0, 0.0]])
    rad = sample_bilinear(env, dirs)
    got = ratio_estimate(dirs, rad, UP, 0.4)
    assert np.allclose(got, rad[0], rtol=1e-14)


def test_ratio_estimator_degenerate_when_all_samples_below_horizon():
    dirs = np.array([[0.0, -1.0, 0.0], [0.3, -0.8, 0.52]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rad = np.ones((2, 3))
    with pytest.raises(DegenerateEstimatorError):
        ratio_estimate(dirs, rad, UP, 0.5)


def test_ratio_estimate_is_convex_combination_of_radiances():
    env = bright_texel_env()
    dirs, rad = draw_light_samples(env, 512, RngStream(3))
    for rho in (0.05, 0.5, 1.0):
        got = ratio_estimate(dirs, rad, UP, rho)
        assert np.all(got >= rad.min(axis=0) - 1e-12)
        assert np.all(got <= rad.max(axis=0) + 1e-12)


def test_bright_texel_dominates_when_lobe_points_at_it():
    env = bright_texel_env(width=32, row=4, col=9, value=50.0)
    dirs, rad = draw_light_samples(env, 4096, RngStream(4))
    bright_dir = dirs[np.argmax(rad[:, 0])]
    toward = ratio_estimate(dirs, rad, bright_dir, 0.05)
    away = ratio_estimate(dirs, rad, -bright_dir, 0.05)
    assert toward[0] > 10 * away[0]


def test_ratio_estimate_many_matches_scalar_loop():
    env = smooth_env()
    dirs, rad = draw_light_samples(env, 600, RngStream(5))
    w_rs, _ = uniform_sphere(RngStream(6), 300)  # crosses the 256 block size
    rhos = np.linspace(0.05, 1.0, 300)
    batch = ratio_estimate_many(dirs, rad, w_rs, rhos)
    for i in (0, 128, 255, 256, 299):
        single = ratio_estimate(dirs, rad, w_rs[i], float(rhos[i]))
        assert np.allclose(batch[i], single, rtol=1e-12)


def test_ratio_estimate_many_scalar_rho_broadcasts():
    env = smooth_env()
    dirs, rad = draw_light_samples(env, 64, RngStream(7))
    w_rs, _ = uniform_sphere(RngStream(8), 4)
    batch = ratio_estimate_many(dirs, rad, w_rs, 0.3)
    assert batch.shape == (4, 3)
    assert np.allclose(batch[2], ratio_estimate(dirs, rad, w_rs[2], 0.3))


def test_ratio_estimate_many_raises_on_degenerate_row():
    dirs = np.array([[0.0, 1.0, 0.0]])
    rad = np.ones((1, 3))
    with pytest.raises(DegenerateEstimatorError):
        ratio_estimate_many(dirs, rad, np.array([UP, -UP]), 0.5)


def test_mc_prefilter_low_roughness_is_exact_bilinear_lookup():
    env = smooth_env()
    samples = draw_light_samples(env, 32, RngStream(9))
    d = np.array([0.6, 0.64, 0.48])
    d /= np.linalg.norm(d)
    got = mc_prefilter(env, d, RHO_MIN / 2, samples)
    assert np.array_equal(got, sample_bilinear(env, d))


def test_mc_prefilter_validates_rho():
    env = constant_env(1.0)
    samples = draw_light_samples(env, 32, RngStream(10))
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            mc_prefilter(env, UP, bad, samples)


def test_draw_light_samples_validates_count():
    with pytest.raises(ValueError):
        draw_light_samples(constant_env(1.0), 0, RngStream(0))


# ---------------------------------------------------------------------------
# Diffuse irradiance

def test_diffuse_irradiance_quadrature_constant_env():
    # (1/pi) integral(c <w,n>+ dw) = c; texel quadrature should be close
    env = constant_env((2.0, 1.0, 0.5), width=64)
    got = diffuse_irradiance(env, UP)
    assert np.allclose(got, [2.0, 1.0, 0.5], rtol=2e-3)


def test_diffuse_irradiance_mc_matches_quadrature():
    env = smooth_env()
    oracle = diffuse_irradiance(env, UP)
    samples = draw_light_samples(env, 200_000, RngStream(11))
    mc = diffuse_irradiance(env, UP, method="mc", light_samples=samples)
    assert np.allclose(mc, oracle, rtol=0.02)


def test_diffuse_irradiance_mc_equals_ratio_at_full_roughness():
    env = smooth_env()
    samples = draw_light_samples(env, 512, RngStream(12))
    mc = diffuse_irradiance(env, UP, method="mc", light_samples=samples)
    assert np.allclose(mc, ratio_estimate(*samples, UP, 1.0), rtol=1e-14)


def test_diffuse_irradiance_method_validation():
    env = constant_env(1.0)
    with pytest.raises(ValueError):
        diffuse_irradiance(env, UP, method="nope")
    with pytest.raises(ValueError):
        diffuse_irradiance(env, UP, method="mc")  # missing samples


# ---------------------------------------------------------------------------
# Pyramid

def test_pyramid_level_zero_is_exact_copy():
    env = smooth_env()
    pyr = bake_pyramid(env, level_count=2, samples_per_texel=16, rng=RngStream(0))
    assert np.array_equal(pyr.levels[0].texels, env.texels)
    assert pyr.levels[0].texels is not env.texels  # defensive copy


def test_pyramid_rhos_are_uniform_grid():
    env = constant_env(1.0, width=8)
    pyr = bake_pyramid(env, level_count=5, samples_per_texel=16, rng=RngStream(0))
    assert np.allclose(pyr.rhos, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert len(pyr.levels) == 5


def test_pyramid_constant_env_constant_at_every_level():
    env = constant_env((0.2, 3.0, 1.1), width=8)
    pyr = bake_pyramid(env, level_count=4, samples_per_texel=16, rng=RngStream(1))
    for lv in pyr.levels:
        assert np.allclose(lv.texels, [0.2, 3.0, 1.1], rtol=1e-6)


def test_pyramid_determinism():
    env = smooth_env()
    a = bake_pyramid(env, level_count=3, samples_per_texel=32, rng=RngStream(7))
    b = bake_pyramid(env, level_count=3, samples_per_texel=32, rng=RngStream(7))
    for la, lb in zip(a.levels, b.levels):
        assert np.array_equal(la.texels, lb.texels)


def test_pyramid_smooths_with_roughness():
    env = bright_texel_env(width=16, row=3, col=5, value=100.0)
    pyr = bake_pyramid(env, level_count=3, samples_per_texel=2048, rng=RngStream(2))
    peaks = [float(lv.texels[..., 0].max()) for lv in pyr.levels]
    assert peaks[0] > peaks[1] > peaks[2]


def test_bake_pyramid_validation():
    env = constant_env(1.0, width=8)
    with pytest.raises(ValueError):
        bake_pyramid(env, level_count=1)
    with pytest.raises(ValueError):
        bake_pyramid(env, level_count=3, samples_per_texel=8)


def test_pyramid_dataclass_validation():
    lv = constant_env(1.0, width=8)
    with pytest.raises(ValueError):
        PrefilteredPyramid(rhos=np.array([0.0]), levels=[lv])
    with pytest.raises(ValueError):
        PrefilteredPyramid(rhos=np.array([0.0, 0.0]), levels=[lv, lv])


def test_lookup_pyramid_at_level_rho_is_bilinear_sample():
    env = smooth_env()
    pyr = bake_pyramid(env, level_count=3, samples_per_texel=64, rng=RngStream(3))
    d = np.array([0.3, -0.4, 0.866])
    d /= np.linalg.norm(d)
    for j, rho in enumerate(pyr.rhos):
        got = lookup_pyramid(pyr, d, float(rho))
        assert np.allclose(got, sample_bilinear(pyr.levels[j], d), rtol=1e-12)


def test_lookup_pyramid_interpolates_between_levels():
    env = smooth_env()
    pyr = bake_pyramid(env, level_count=3, samples_per_texel=64, rng=RngStream(4))
    d = UP
    mid = lookup_pyramid(pyr, d, 0.25)  # halfway between rhos 0.0 and 0.5
    lo = sample_bilinear(pyr.levels[0], d)
    hi = sample_bilinear(pyr.levels[1], d)
    assert np.allclose(mid, 0.5 * (lo + hi), rtol=1e-12)


def test_lookup_pyramid_clamps_roughness():
    env = smooth_env()
    pyr = bake_pyramid(env, level_count=2, samples_per_texel=32, rng=RngStream(5))
    assert np.allclose(lookup_pyramid(pyr, UP, 2.0), lookup_pyramid(pyr, UP, 1.0))
    assert np.allclose(lookup_pyramid(pyr, UP, -1.0), lookup_pyramid(pyr, UP, 0.0))


def test_lookup_pyramid_batch_shapes():
    env = smooth_env()
    pyr = bake_pyramid(env, level_count=2, samples_per_texel=32, rng=RngStream(6))
    ds, _ = uniform_sphere(RngStream(7), 5)
    out = lookup_pyramid(pyr, ds, np.linspace(0, 1, 5))
    assert out.shape == (5, 3)
    one = lookup_pyramid(pyr, ds[2], 0.5)
    assert one.shape == (3,)
    assert np.allclose(one, lookup_pyramid(pyr, ds, 0.5)[2])


def test_pyramid_save_load_roundtrip(tmp_path):
    env = smooth_env()
    pyr = bake_pyramid(env, level_count=3, samples_per_texel=32, rng=RngStream(8))
    save_pyramid(pyr, tmp_path / "pyr")
    back = load_pyramid(tmp_path / "pyr")
    assert np.array_equal(back.rhos, pyr.rhos)
    assert len(back.levels) == 3
    for la, lb in zip(pyr.levels, back.levels):
        # levels pass through the shared-exponent codec: bounded relative error
        err = np.abs(la.texels.astype(np.float64) - lb.texels)
        bound = la.texels.max(axis=2, keepdims=True) / 128 + 1e-30
        assert np.all(err <= bound)
