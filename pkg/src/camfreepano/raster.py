"""Masked image grids, bilinear sampling, homography warps and random camera warps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .geometry import (CameraParams, Homography, canonical_params, homography_from_params,
                       project_points)

FOV_RANGE = (60.0, 110.0)
ROTATION_RANGE = (-15.0, 15.0)

# output pixels need (almost) all four source neighbours valid
VALID_THRESHOLD = 0.999


class ImageRaster:
    """An ``H x W x C`` float64 grid plus a per-pixel validity mask (True = valid).

    Invalid pixels always hold zeros.  Instances are read-only; any
    channel count is allowed so feature grids go through the same warps.
    """

    __slots__ = ("data", "mask")

    def __init__(self, data: np.ndarray, mask: Optional[np.ndarray] = None):
        data = np.array(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"expected an HxWxC array, got shape {data.shape}")
        if mask is None:
            mask = np.ones(data.shape[:2], dtype=bool)
        else:
            mask = np.array(mask, dtype=bool)
            if mask.shape != data.shape[:2]:
                raise ValueError(f"mask shape {mask.shape} does not match image {data.shape[:2]}")
        data[~mask] = 0.0
        data.setflags(write=False)
        mask.setflags(write=False)
        self.data = data
        self.mask = mask

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __repr__(self) -> str:
        return f"ImageRaster({self.width}x{self.height}x{self.channels}, valid={self.mask.mean():.3f})"

    @classmethod
    def constant(cls, width: int, height: int, value, channels: int = 3) -> "ImageRaster":
        return cls(np.full((height, width, channels), value, dtype=np.float64))


@dataclass(frozen=True)
class WarpSpec:
    """Warp taking source pixels ``p`` to output pixels ``homography @ p``."""

    homography: Homography
    out_width: int
    out_height: int


def sample_bilinear(img: ImageRaster, u, v) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample ``img`` at real pixel coordinates.

    Neighbours outside the grid count as invalid zeros, so the returned
    weight is the interpolated mask.  NaN coordinates give value 0, weight 0.

    Returns:
        ``(values, weight)`` with shapes ``u.shape + (C,)`` and ``u.shape``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    shape = np.broadcast(u, v).shape
    u = np.broadcast_to(u, shape).ravel()
    v = np.broadcast_to(v, shape).ravel()
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, -10.0)
    v = np.where(finite, v, -10.0)

    h, w = img.height, img.width
    u0 = np.floor(u)
    v0 = np.floor(v)
    du = u - u0
    dv = v - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)

    values = np.zeros((u.size, img.channels))
    weight = np.zeros(u.size)
    for oy, wy in ((0, 1.0 - dv), (1, dv)):
        for ox, wx in ((0, 1.0 - du), (1, du)):
            x = u0 + ox
            y = v0 + oy
            inside = (x >= 0) & (x < w) & (y >= 0) & (y < h)
            xi = np.where(inside, x, 0)
            yi = np.where(inside, y, 0)
            k = np.where(inside, wx * wy, 0.0)
            values += k[:, None] * img.data[yi, xi]
            weight += k * img.mask[yi, xi]
    return values.reshape(shape + (img.channels,)), weight.reshape(shape)


def pixel_grid(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    vv, uu = np.mgrid[0:height, 0:width].astype(np.float64)
    return uu, vv


def sample_valid(img: ImageRaster, u, v) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear samples with a validity decision.

    A sample is valid when its interpolated validity reaches
    ``VALID_THRESHOLD``; its value is renormalised by that weight so the
    (< 0.1%) share of an invalid neighbour cannot darken it.  Invalid
    samples are zero.
    """
    values, weight = sample_bilinear(img, u, v)
    mask = weight >= VALID_THRESHOLD
    out = np.zeros_like(values)
    out[mask] = values[mask] / weight[mask][..., None]
    return out, mask


def resample(img: ImageRaster, u, v, front=None) -> ImageRaster:
    """Sample ``img`` on a 2-D grid of coordinates into a new masked raster."""
    values, mask = sample_valid(img, u, v)
    if front is not None:
        mask &= front
    return ImageRaster(values, mask)


def warp_image(img: ImageRaster, spec: WarpSpec) -> ImageRaster:
    """Backward-sample ``img`` so that output pixel p shows source pixel ``H^-1 p``."""
    inv = spec.homography.inverse()
    uu, vv = pixel_grid(spec.out_width, spec.out_height)
    su, sv, front = project_points(inv, uu, vv)
    return resample(img, su, sv, front)


def draw_warp_params(rng_seed: int, size: int = 512) -> CameraParams:
    rng = np.random.default_rng(rng_seed)
    fov = rng.uniform(*FOV_RANGE)
    phi = rng.uniform(*ROTATION_RANGE)
    psi = rng.uniform(*ROTATION_RANGE)
    return CameraParams(float(fov), float(phi), float(psi), size, size)


def random_warp(img: ImageRaster, rng_seed: int) -> Tuple[ImageRaster, CameraParams]:
    """Render what a randomly perturbed camera would have seen of a canonical view.

    ``img`` is treated as a 90 degree canonical crop of its own (square)
    size.  Pixels the canonical view does not cover come back invalid.
    """
    if img.width != img.height:
        raise ValueError("random_warp expects a square canonical view")
    params = draw_warp_params(rng_seed, img.width)
    to_canonical = homography_from_params(params, canonical_params(img.width))
    warped = warp_image(img, WarpSpec(to_canonical.inverse(), params.width, params.height))
    return warped, params


def unwarp_to_canonical(img: ImageRaster, params: CameraParams, size: Optional[int] = None) -> ImageRaster:
    """Rectify an input view into the canonical view using its camera parameters."""
    size = size or img.width
    h = homography_from_params(params, canonical_params(size))
    return warp_image(img, WarpSpec(h, size, size))


def psnr(a: ImageRaster, b: ImageRaster, region: Optional[np.ndarray] = None, peak: float = 1.0) -> float:
    """PSNR in dB over pixels valid in both images (and in ``region`` if given)."""
    if a.data.shape != b.data.shape:
        raise ValueError("PSNR needs images of the same shape")
    m = a.mask & b.mask
    if region is not None:
        m = m & region
    if not m.any():
        raise ValueError("no mutually valid pixels")
    mse = float(np.mean((a.data[m] - b.data[m]) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def read_png(path) -> ImageRaster:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return ImageRaster(arr)


def to_uint8(data: np.ndarray) -> np.ndarray:
    # round half up
    return np.clip(np.floor(np.asarray(data) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_png(img: ImageRaster, path) -> None:
    from PIL import Image

    data = img.data
    if img.channels == 1:
        arr = to_uint8(data[:, :, 0])
    elif img.channels == 3:
        arr = to_uint8(data)
    else:
        raise ValueError(f"PNG output needs 1 or 3 channels, got {img.channels}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def write_mask_png(mask: np.ndarray, path) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")
