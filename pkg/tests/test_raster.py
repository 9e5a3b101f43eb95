import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camfreepano.geometry import CameraParams, Homography, canonical_params, homography_from_params, project_points
from camfreepano.raster import (FOV_RANGE, ROTATION_RANGE, ImageRaster, WarpSpec, draw_warp_params, psnr,
                                random_warp, read_png, sample_bilinear, to_uint8, unwarp_to_canonical,
                                warp_image, write_png)
from camfreepano.synth import smooth_image
from camfreepano.verify import warp_round_trip_psnr


def test_raster_zeroes_invalid_pixels_and_is_read_only():
    img = ImageRaster(np.full((2, 3, 1), 0.7), np.array([[True, False, True], [True, True, True]]))
    assert img.data[0, 1, 0] == 0.0
    assert (img.width, img.height, img.channels) == (3, 2, 1)
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0


def test_raster_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ImageRaster(np.zeros((2, 2, 2, 2)))
    with pytest.raises(ValueError):
        ImageRaster(np.zeros((2, 2)), np.ones((3, 3), bool))


def test_bilinear_trivial_cases():
    img = ImageRaster(np.array([[0.2, 0.6], [0.1, 0.3]]))
    val, w = sample_bilinear(img, 1.0, 0.0)
    assert val[0] == 0.6 and w == 1.0
    val, w = sample_bilinear(img, 0.5, 0.0)
    assert val[0] == pytest.approx(0.4, abs=1e-15) and w == 1.0
    val, w = sample_bilinear(img, -5.0, -5.0)
    assert val[0] == 0.0 and w == 0.0
    val, w = sample_bilinear(img, np.nan, 0.0)
    assert val[0] == 0.0 and w == 0.0


def test_bilinear_weight_is_interpolated_mask():
    img = ImageRaster(np.ones((2, 2)), np.array([[True, False], [True, True]]))
    _, w = sample_bilinear(img, 0.5, 0.5)
    assert w == pytest.approx(0.75)


def test_identity_warp_bit_exact(smooth128):
    out = warp_image(smooth128, WarpSpec(Homography(np.eye(3)), 128, 128))
    assert np.array_equal(out.data, smooth128.data) and out.mask.all()


@settings(max_examples=25, deadline=None)
@given(st.floats(60, 110), st.floats(-15, 15), st.floats(-15, 15), st.floats(0.0, 1.0))
def test_constant_is_fixed_point(fov, phi, psi, value):
    img = ImageRaster.constant(64, 64, value)
    h = homography_from_params(CameraParams(fov, phi, psi, 64, 64), canonical_params(64))
    out = warp_image(img, WarpSpec(h, 64, 64))
    assert np.abs(out.data[out.mask] - value).max(initial=0.0) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.floats(60, 110), st.floats(-15, 15), st.floats(-15, 15))
def test_warp_is_mask_monotone(fov, phi, psi):
    # valid output pixels are exactly those whose preimage has four valid neighbours
    mask = np.ones((48, 48), bool)
    mask[10:20, 30:40] = False
    img = ImageRaster(np.ones((48, 48, 1)), mask)
    h = homography_from_params(CameraParams(fov, phi, psi, 48, 48), canonical_params(48))
    out = warp_image(img, WarpSpec(h, 48, 48))
    vv, uu = np.mgrid[0:48, 0:48].astype(float)
    su, sv, front = project_points(h.inverse(), uu, vv)
    expect = np.zeros((48, 48), bool)
    for (y, x) in zip(*np.nonzero(front)):
        u0, v0 = int(np.floor(su[y, x])), int(np.floor(sv[y, x]))
        du, dv = su[y, x] - u0, sv[y, x] - v0
        w = 0.0
        for oy, wy in ((0, 1 - dv), (1, dv)):
            for ox, wx in ((0, 1 - du), (1, du)):
                if 0 <= u0 + ox < 48 and 0 <= v0 + oy < 48 and mask[v0 + oy, u0 + ox]:
                    w += wx * wy
        expect[y, x] = w >= 0.999
    assert np.array_equal(out.mask, expect)
    assert np.all(out.data[out.mask] == pytest.approx(1.0, abs=1e-12))


def test_round_trip_psnr_on_smooth_image(smooth512):
    rng = np.random.default_rng(1)
    for s in rng.integers(0, 2**31, size=3):
        assert warp_round_trip_psnr(smooth512, draw_warp_params(int(s))) >= 30.0


def test_random_warp_ranges_over_many_seeds():
    draws = np.array([[p.fov_deg, p.phi_deg, p.psi_deg] for p in map(draw_warp_params, range(10_000))])
    assert draws[:, 0].min() >= FOV_RANGE[0] and draws[:, 0].max() <= FOV_RANGE[1]
    assert draws[:, 1:].min() >= ROTATION_RANGE[0] and draws[:, 1:].max() <= ROTATION_RANGE[1]
    # the whole box gets used
    assert draws[:, 0].max() - draws[:, 0].min() > 49.0


def test_random_warp_deterministic(smooth128):
    a, pa = random_warp(smooth128, 42)
    b, pb = random_warp(smooth128, 42)
    assert pa == pb and np.array_equal(a.data, b.data) and np.array_equal(a.mask, b.mask)
    c, pc = random_warp(smooth128, 43)
    assert pc != pa


def test_random_warp_unwarps_back(smooth512):
    for seed in (0, 1):
        warped, params = random_warp(smooth512, seed)
        back = unwarp_to_canonical(warped, params)
        assert psnr(smooth512, back) >= 30.0


def test_random_warp_needs_square():
    with pytest.raises(ValueError):
        random_warp(ImageRaster(np.zeros((4, 8, 3))), 0)


def test_feature_grids_warp_like_images():
    grid = smooth_image(64, seed=9, channels=7)
    h = homography_from_params(CameraParams(75.0, 4.0, -6.0, 64, 64), canonical_params(64))
    out = warp_image(grid, WarpSpec(h, 64, 64))
    rgb = warp_image(ImageRaster(grid.data[:, :, :3]), WarpSpec(h, 64, 64))
    assert out.channels == 7 and np.array_equal(out.data[:, :, :3], rgb.data)


def test_png_round_half_up(tmp_path):
    assert to_uint8(np.array([0.5 / 255, 1.5 / 255, 1.0, 1.2, -0.1])).tolist() == [1, 2, 255, 255, 0]
    img = ImageRaster(np.random.default_rng(0).integers(0, 256, size=(8, 8, 3)) / 255.0)
    write_png(img, tmp_path / "a.png")
    assert np.array_equal(read_png(tmp_path / "a.png").data, img.data)


def test_psnr_needs_overlap():
    a = ImageRaster(np.zeros((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        psnr(a, a)
