"""Procedural test imagery: band-limited images, smooth panoramas and box-room panoramas."""

from __future__ import annotations

import math

import numpy as np

from .raster import ImageRaster


def smooth_image(size: int, seed: int = 0, channels: int = 3, min_period: float = 48.0,
                 terms: int = 6) -> ImageRaster:
    """Sum of random plane waves with periods >= ``min_period`` pixels, values in [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((size, size, channels))
    for c in range(channels):
        acc = np.zeros((size, size))
        for _ in range(terms):
            period = rng.uniform(min_period, 4 * min_period)
            ang = rng.uniform(0, 2 * math.pi)
            kx, ky = math.cos(ang) * 2 * math.pi / period, math.sin(ang) * 2 * math.pi / period
            acc += np.sin(kx * uu + ky * vv + rng.uniform(0, 2 * math.pi))
        out[:, :, c] = 0.5 + 0.4 * acc / terms
    return ImageRaster(out)


def equirect_directions(height: int):
    """Unit ray directions (x right, y down, z forward) at equirect pixel centres."""
    width = 2 * height
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    lon = (jj + 0.5) / width * 2 * math.pi - math.pi
    lat = math.pi / 2 - (ii + 0.5) / height * math.pi
    cl = np.cos(lat)
    return cl * np.sin(lon), -np.sin(lat), cl * np.cos(lon)


def smooth_panorama(height: int, seed: int = 0, channels: int = 3, max_freq: float = 6.0,
                    terms: int = 8) -> ImageRaster:
    """Panorama of low-frequency plane waves over the unit sphere (seamless at the wrap)."""
    rng = np.random.default_rng(seed)
    x, y, z = equirect_directions(height)
    out = np.empty(x.shape + (channels,))
    for c in range(channels):
        acc = np.zeros(x.shape)
        for _ in range(terms):
            k = rng.normal(size=3)
            k *= rng.uniform(1.0, max_freq) / np.linalg.norm(k)
            acc += np.sin(k[0] * x + k[1] * y + k[2] * z + rng.uniform(0, 2 * math.pi))
        out[:, :, c] = 0.5 + 0.4 * acc / terms
    return ImageRaster(out)


def _soft_lines(coord: np.ndarray, spacing: float, width: float) -> np.ndarray:
    """1 on lines every ``spacing`` units, falling off smoothly over ``width``."""
    d = np.abs(coord / spacing - np.round(coord / spacing)) * spacing
    return np.exp(-0.5 * (d / width) ** 2)


def room_panorama(height: int, seed: int = 0) -> ImageRaster:
    """Render a textured box room seen from inside as an equirectangular panorama.

    The room has a tiled floor, panelled walls with a dado rail and a plain
    ceiling, so perspective crops carry horizon, vertical-line and
    texture-scale cues.
    """
    rng = np.random.default_rng(seed)
    x, y, z = equirect_directions(height)
    yaw = rng.uniform(0, 2 * math.pi)
    c, s = math.cos(yaw), math.sin(yaw)
    x, z = c * x + s * z, -s * x + c * z

    x_lo, x_hi = -rng.uniform(1.5, 4.0), rng.uniform(1.5, 4.0)
    z_lo, z_hi = -rng.uniform(1.5, 4.0), rng.uniform(1.5, 4.0)
    floor_y = rng.uniform(1.2, 1.7)
    ceil_y = -rng.uniform(0.9, 1.6)

    big = np.full(x.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(x > 0, x_hi / x, np.where(x < 0, x_lo / x, np.inf))
        tz = np.where(z > 0, z_hi / z, np.where(z < 0, z_lo / z, np.inf))
        ty = np.where(y > 0, floor_y / y, np.where(y < 0, ceil_y / y, np.inf))
    t = np.minimum(np.minimum(tx, tz), np.minimum(ty, big))
    px, py, pz = t * x, t * y, t * z

    palette = rng.uniform(0.15, 0.85, size=(6, 3))
    out = np.zeros(x.shape + (3,))
    tile = rng.uniform(0.4, 0.8)
    panel = rng.uniform(0.5, 1.2)
    rail = rng.uniform(0.2, 0.8)

    on_floor = (t == ty) & (y > 0)
    on_ceil = (t == ty) & (y < 0)
    on_xwall = (t == tx) & ~on_floor & ~on_ceil
    on_zwall = ~on_floor & ~on_ceil & ~on_xwall

    grid = np.maximum(_soft_lines(px, tile, 0.02), _soft_lines(pz, tile, 0.02))
    floor_col = palette[0] * (1 - 0.6 * grid[..., None])
    ceil_col = palette[1] * (1 - 0.3 * _soft_lines(px, 2 * tile, 0.03)[..., None])
    rail_line = _soft_lines(py - rail, 100.0, 0.025)[..., None]
    xwall = palette[np.where(x > 0, 2, 3)] * (1 - 0.5 * _soft_lines(pz, panel, 0.03)[..., None]) * (1 - 0.6 * rail_line)
    zwall = palette[np.where(z > 0, 4, 5)] * (1 - 0.5 * _soft_lines(px, panel, 0.03)[..., None]) * (1 - 0.6 * rail_line)

    out = np.where(on_floor[..., None], floor_col, out)
    out = np.where(on_ceil[..., None], ceil_col, out)
    out = np.where(on_xwall[..., None], xwall, out)
    out = np.where(on_zwall[..., None], zwall, out)
    # light falloff with distance keeps corners readable
    out *= (0.6 + 0.4 * np.exp(-0.15 * t))[..., None]
    return ImageRaster(np.clip(out, 0.0, 1.0))
