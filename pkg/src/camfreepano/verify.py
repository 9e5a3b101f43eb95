"""Invariant suites behind ``camfreepano verify`` and ``camfreepano caa-check``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import geometry as geo
from .caa import CaaTensors, caa_backward, caa_forward
from .oracles import central_difference, dlt_homography, grad_relative_error, naive_caa
from .pano import CorrespondenceMap, PanoLayout, build_correspondence, equirect_to_views, latitude_band, \
    views_to_equirect
from .raster import ImageRaster, WarpSpec, draw_warp_params, psnr, warp_image
from .synth import smooth_image, smooth_panorama


@dataclass(frozen=True)
class Check:
    name: str
    observed: float
    tolerance: float
    passed: bool
    # "max" checks want observed <= tolerance; "min" checks want observed >= tolerance
    kind: str = "max"

    def line(self) -> str:
        rel = "<=" if self.kind == "max" else ">="
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: observed {self.observed:.3e} (want {rel} {self.tolerance:.1e})"


def at_most(name: str, observed: float, tol: float) -> Check:
    return Check(name, float(observed), tol, bool(observed <= tol), "max")


def at_least(name: str, observed: float, tol: float) -> Check:
    return Check(name, float(observed), tol, bool(observed >= tol), "min")


# ---------------------------------------------------------------------------
# geometry

def corners(width: int, height: int) -> np.ndarray:
    return np.array([[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]])


def dlt_distance(params: geo.CameraParams) -> float:
    h = geo.homography_from_params(params)
    src = corners(params.width, params.height)
    dst = np.array([geo.project_point(h, tuple(p)) for p in src])
    return float(np.linalg.norm(dlt_homography(src, dst) - h.matrix))


def param_grid():
    fovs = np.linspace(60.0, 110.0, 7)
    angles = np.linspace(-15.0, 15.0, 7)
    return [geo.CameraParams(float(f), float(a), float(b)) for f, a, b in itertools.product(fovs, angles, angles)]


def geometry_suite(seed: int = 0) -> List[Check]:
    ident = geo.homography_from_params(geo.canonical_params()).matrix
    k = geo.intrinsics_from_params(geo.canonical_params())
    checks = [
        at_most("canonical H == identity", np.abs(ident - np.eye(3)).max(), 1e-12),
        at_most("canonical intrinsics fx=256 cx=255.5",
                max(abs(k.fx - 256.0), abs(k.fy - 256.0), abs(k.cx - 255.5), abs(k.cy - 255.5)), 0.0),
    ]
    worst = 0.0
    for p in param_grid():
        r = geo.params_from_homography(geo.homography_from_params(p), p.width, p.height)
        worst = max(worst, abs(r.fov_deg - p.fov_deg), abs(r.phi_deg - p.phi_deg), abs(r.psi_deg - p.psi_deg))
    checks.append(at_most("params -> H -> params (7x7x7 grid, deg)", worst, 1e-7))

    rng = np.random.default_rng(seed)
    draws = [draw_warp_params(int(s)) for s in rng.integers(0, 2**31, size=100)]
    checks.append(at_most("closed-form H vs 4-point DLT (Frobenius)", max(dlt_distance(p) for p in draws), 1e-6))

    orth = 0.0
    for p in draws:
        r = geo.rotation_from_angles(p.phi_deg, p.psi_deg)
        orth = max(orth, np.linalg.norm(r @ r.T - np.eye(3)), abs(np.linalg.det(r) - 1.0))
    checks.append(at_most("rotation orthonormality", orth, 1e-12))

    rt = 0.0
    for p in draws[:20]:
        h = geo.homography_from_params(p)
        hi = geo.homography_from_params_inverse(p)
        for uv in rng.uniform(0, 511, size=(10, 2)):
            q = geo.project_point(h, tuple(uv))
            back = geo.project_point(hi, q) if q is not None else None
            if back is not None:
                rt = max(rt, np.hypot(back[0] - uv[0], back[1] - uv[1]))
    checks.append(at_most("project_point round trip (px)", rt, 1e-8))
    return checks


# ---------------------------------------------------------------------------
# warping

def warp_round_trip_psnr(img: ImageRaster, params: geo.CameraParams) -> float:
    size = img.width
    h = geo.homography_from_params(params, geo.canonical_params(size))
    forward = warp_image(img, WarpSpec(h.inverse(), size, size))
    back = warp_image(forward, WarpSpec(h, size, size))
    return psnr(img, back)


def warp_suite(seed: int = 0, n: int = 10, size: int = 512) -> List[Check]:
    img = smooth_image(size, seed)
    rng = np.random.default_rng(seed)
    worst = min(warp_round_trip_psnr(img, draw_warp_params(int(s), size))
                for s in rng.integers(0, 2**31, size=n))
    const = ImageRaster.constant(size, size, 0.5)
    dev = 0.0
    for s in rng.integers(0, 2**31, size=3):
        h = geo.homography_from_params(draw_warp_params(int(s), size), geo.canonical_params(size))
        out = warp_image(const, WarpSpec(h, size, size))
        dev = max(dev, float(np.abs(out.data[out.mask] - 0.5).max()))
    ident = warp_image(img, WarpSpec(geo.Homography(np.eye(3)), size, size))
    return [
        at_least(f"warp/unwarp round trip PSNR over {n} warps (dB)", worst, 30.0),
        at_most("constant image is a warp fixed point", dev, 1e-12),
        at_most("identity warp is exact", float(np.abs(ident.data - img.data).max()), 0.0),
    ]


# ---------------------------------------------------------------------------
# panorama

def pano_suite(seed: int = 0, height: int = 512, view_size: int = 512) -> List[Check]:
    layout = PanoLayout(view_size=view_size)
    pano = smooth_panorama(height, seed)
    stitched = views_to_equirect(equirect_to_views(pano, layout), layout, height)
    band = latitude_band(height, 2 * height)
    adjacent = build_correspondence(0, 1, layout)
    opposite = build_correspondence(0, 4, layout)
    tol_col = 1.0 / view_size
    sym = max(abs(build_correspondence(i, j, layout).visible_fraction
                  - build_correspondence(j, i, layout).visible_fraction)
              for i, j in [(0, 1), (2, 3), (0, 7)])
    equi = 0
    base = build_correspondence(0, 1, layout)
    for k in range(1, 8):
        other = build_correspondence(k, (k + 1) % 8, layout)
        equi += int(not (np.array_equal(base.visible, other.visible)
                         and np.array_equal(base.src_u, other.src_u, equal_nan=True)))
    return [
        at_least("slice/stitch PSNR on +-45 deg band (dB)", psnr(pano, stitched, band), 30.0),
        at_most("adjacent views: |column coverage - 0.5|", abs(adjacent.column_coverage - 0.5), tol_col),
        at_most("opposite views: visible fraction", opposite.visible_fraction, 0.0),
        at_most("canonical pair visibility symmetry", sym, 0.01),
        at_most("yaw equivariance mismatches", equi, 0),
    ]


# ---------------------------------------------------------------------------
# attention

def random_map(rng, ht: int, wt: int, hs: int, ws: int) -> CorrespondenceMap:
    su = rng.uniform(-1.5, ws + 0.5, size=(ht, wt))
    sv = rng.uniform(-1.5, hs + 0.5, size=(ht, wt))
    vis = (su >= 0) & (su <= ws - 1) & (sv >= 0) & (sv <= hs - 1)
    return CorrespondenceMap(su, sv, vis, -1, 0, ws, hs)


def random_tensors(rng, ht: int, wt: int, hs: int, ws: int, d: int, k: int) -> CaaTensors:
    return CaaTensors(rng.normal(size=(ht, wt, d)), rng.normal(size=(hs, ws, d)),
                      rng.normal(size=(d, d)), rng.normal(size=(d, d)), rng.normal(size=(d, d)), k)


def caa_oracle_error(rng, size: int, d: int, k: int) -> float:
    cmap = random_map(rng, size, size, size, size)
    t = random_tensors(rng, size, size, size, size, d, k)
    fast = caa_forward(t, cmap).values
    slow = naive_caa(t.target, t.source, t.w_q, t.w_k, t.w_v, cmap.src_u, cmap.src_v, cmap.visible, k)
    return float(np.abs(fast - slow).max())


def caa_grad_error(rng, size: int = 4, d: int = 3, k: int = 3, step: float = 1e-5) -> float:
    cmap = random_map(rng, size, size, size, size)
    t = random_tensors(rng, size, size, size, size, d, k)
    g_up = rng.normal(size=t.target.shape)
    grads = caa_backward(t, cmap, g_up)
    worst = 0.0
    for name in ("target", "source", "w_q", "w_k", "w_v"):
        def objective(x, name=name):
            return float(np.sum(g_up * caa_forward(t.replace(**{name: x}), cmap).values))
        numeric = central_difference(objective, getattr(t, name), step)
        worst = max(worst, grad_relative_error(getattr(grads, name), numeric))
    return worst


def caa_suite(seed: int = 0, grad_seeds: int = 20) -> List[Check]:
    oracle = 0.0
    for size, d, k in itertools.product((2, 4, 8), (1, 2, 4), (1, 3, 5)):
        oracle = max(oracle, caa_oracle_error(np.random.default_rng([seed, size, d, k]), size, d, k))
    grad = max(caa_grad_error(np.random.default_rng([seed, 1000 + s])) for s in range(grad_seeds))

    rng = np.random.default_rng([seed, 7])
    cmap = random_map(rng, 6, 6, 6, 6)
    t = random_tensors(rng, 6, 6, 6, 6, 3, 1)
    out = caa_forward(t, cmap).values
    rows, cols = np.nonzero(cmap.visible)
    su = np.floor(cmap.src_u[rows, cols] + 0.5).astype(int)
    sv = np.floor(cmap.src_v[rows, cols] + 0.5).astype(int)
    expect = t.source[sv, su] @ t.w_v.T
    k1 = float(np.abs(out[rows, cols] - expect).max())
    return [
        at_most("forward vs naive oracle (<=8x8, d<=4, K in 1,3,5)", oracle, 1e-12),
        at_most(f"analytic vs central-difference gradients ({grad_seeds} seeds, rel)", grad, 1e-4),
        at_most("K=1 gives W_V f(p_s)", k1, 0.0),
    ]


SUITES: Dict[str, Callable[..., List[Check]]] = {
    "geometry": geometry_suite,
    "warp": warp_suite,
    "pano": pano_suite,
    "caa": caa_suite,
}
