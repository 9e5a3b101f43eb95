"""Eight-view panorama layout, equirectangular slicing/stitching and correspondence maps.

Equirectangular grids use pixel centres at ``(j + 0.5, i + 0.5)``;
longitude runs from -180 degrees (left edge) to +180 (right edge) and
latitude from +90 (top) to -90 (bottom).  View ``k`` looks along
longitude ``k * yaw_step`` on the equator.  Longitude offsets are kept in
column units so that an integer column shift between views is exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .geometry import (CameraParams, Homography, intrinsics_from_params,
                       project_points, rot_y, rotation_from_angles)
from .raster import VALID_THRESHOLD, ImageRaster, pixel_grid, sample_valid

INPUT_VIEW = -1

CMAP_MAGIC = b"CMAP"
CMAP_VERSION = 1
_CMAP_HEADER = struct.Struct("<4sIIIiiII")
_CMAP_RECORD = np.dtype([("u", "<f4"), ("v", "<f4"), ("visible", "u1")])


@dataclass(frozen=True)
class PanoLayout:
    num_views: int = 8
    fov_deg: float = 90.0
    yaw_step_deg: float = 45.0
    view_size: int = 512

    def __post_init__(self):
        if abs(self.num_views * self.yaw_step_deg - 360.0) > 1e-9:
            raise ValueError("views must tile the full circle")
        if self.view_size < 2:
            raise ValueError("view_size must be >= 2")

    @property
    def overlap_deg(self) -> float:
        return self.fov_deg - self.yaw_step_deg

    def yaw(self, view: int) -> float:
        return (view % self.num_views) * self.yaw_step_deg

    def view_params(self) -> CameraParams:
        return CameraParams(self.fov_deg, 0.0, 0.0, self.view_size, self.view_size)


def _sample_equirect(pano: ImageRaster, col: np.ndarray, row: np.ndarray, col_shift: float = 0.0):
    """Bilinear lookup with longitudinal wrap; rows are clamped at the poles.

    The integer part of ``col_shift`` is added after flooring so that
    integer shifts reproduce the unshifted sample bit-for-bit.
    """
    w, h = pano.width, pano.height
    shift_int = math.floor(col_shift)
    col = col + (col_shift - shift_int)
    c0 = np.floor(col)
    r0 = np.floor(row)
    dc = col - c0
    dr = row - r0
    c0 = c0.astype(np.int64) + shift_int
    r0 = r0.astype(np.int64)
    out = np.zeros(col.shape + (pano.channels,))
    weight = np.zeros(col.shape)
    for oy, wy in ((0, 1.0 - dr), (1, dr)):
        ri = np.clip(r0 + oy, 0, h - 1)
        for ox, wx in ((0, 1.0 - dc), (1, dc)):
            ci = np.mod(c0 + ox, w)
            k = wx * wy
            out += k[..., None] * pano.data[ri, ci]
            weight += k * pano.mask[ri, ci]
    return out, weight


def _view_rays(layout: PanoLayout):
    k = intrinsics_from_params(layout.view_params())
    uu, vv = pixel_grid(layout.view_size, layout.view_size)
    x = (uu - k.cx) / k.fx
    y = (vv - k.cy) / k.fy
    return x, y, np.ones_like(x)


def equirect_to_views(pano: ImageRaster, layout: Optional[PanoLayout] = None) -> List[ImageRaster]:
    """Render the layout's perspective views out of an equirectangular panorama."""
    layout = layout or PanoLayout()
    if pano.width != 2 * pano.height:
        raise ValueError(f"equirectangular panoramas must be 2:1, got {pano.width}x{pano.height}")
    x, y, z = _view_rays(layout)
    lon = np.arctan2(x, z)
    lat = np.arctan2(-y, np.hypot(x, z))
    col = (lon + math.pi) / (2.0 * math.pi) * pano.width - 0.5
    row = (math.pi / 2.0 - lat) / math.pi * pano.height - 0.5
    views = []
    for k in range(layout.num_views):
        shift = layout.yaw(k) / 360.0 * pano.width
        values, weight = _sample_equirect(pano, col, row, shift)
        mask = weight >= VALID_THRESHOLD
        values[mask] /= weight[mask][:, None]
        views.append(ImageRaster(values, mask))
    return views


def views_to_equirect(views: List[ImageRaster], layout: Optional[PanoLayout] = None,
                      height: Optional[int] = None) -> ImageRaster:
    """Stitch the layout's views back into an equirectangular panorama.

    Each view contributes with a tent weight ``1 - |dlon| / yaw_step``, so
    the view whose axis is nearest dominates and overlaps blend linearly.
    Pixels no contributing view covers stay invalid.
    """
    layout = layout or PanoLayout()
    if len(views) != layout.num_views:
        raise ValueError(f"expected {layout.num_views} views, got {len(views)}")
    for v in views:
        if v.width != layout.view_size or v.height != layout.view_size:
            raise ValueError("view size does not match the layout")
    channels = views[0].channels
    height = height or layout.view_size
    width = 2 * height
    k = intrinsics_from_params(layout.view_params())

    jj, ii = pixel_grid(width, height)
    lat = math.pi / 2.0 - (ii + 0.5) / height * math.pi
    acc = np.zeros((height, width, channels))
    wsum = np.zeros((height, width))
    for idx, view in enumerate(views):
        shift = layout.yaw(idx) / 360.0 * width
        offset = np.mod(jj + 0.5 - shift, width) - width / 2.0
        lon = offset * (2.0 * math.pi / width)
        tent = 1.0 - np.abs(np.degrees(lon)) / layout.yaw_step_deg
        near = tent > 0.0
        cl = np.cos(lat[near])
        x = cl * np.sin(lon[near])
        y = -np.sin(lat[near])
        z = cl * np.cos(lon[near])
        u = k.fx * x / z + k.cx
        v = k.fy * y / z + k.cy
        values, ok = sample_valid(view, u, v)
        t = np.where(ok, tent[near], 0.0)
        acc[near] += t[:, None] * values
        wsum[near] += t
    mask = wsum > 0.0
    out = np.zeros_like(acc)
    out[mask] = acc[mask] / wsum[mask][:, None]
    return ImageRaster(out, mask)


def latitude_band(height: int, width: int, max_lat_deg: float = 45.0) -> np.ndarray:
    """Boolean mask of equirect pixels whose centre lies within +-max_lat_deg."""
    lat = 90.0 - (np.arange(height) + 0.5) / height * 180.0
    return np.repeat((np.abs(lat) <= max_lat_deg)[:, None], width, axis=1)


@dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    """Per-target-pixel source coordinates.

    ``src_u``/``src_v`` are NaN where the source point falls behind the
    camera; ``visible`` additionally requires the point to be inside the
    source image.
    """

    src_u: np.ndarray
    src_v: np.ndarray
    visible: np.ndarray
    source_id: int
    target_id: int
    source_width: int
    source_height: int

    @property
    def width(self) -> int:
        return self.visible.shape[1]

    @property
    def height(self) -> int:
        return self.visible.shape[0]

    @property
    def visible_fraction(self) -> float:
        return float(self.visible.mean())

    @property
    def column_coverage(self) -> float:
        """Fraction of target columns with at least one visible pixel (horizontal overlap)."""
        return float(self.visible.any(axis=0).mean())

    def source_of(self, u: int, v: int):
        if not self.visible[v, u]:
            return None
        return float(self.src_u[v, u]), float(self.src_v[v, u])


def pair_homography(source: Union[CameraParams, int], target: int, layout: PanoLayout) -> Homography:
    """Homography taking target-view pixels to source pixels (input or canonical view)."""
    k_view = intrinsics_from_params(layout.view_params())
    if isinstance(source, CameraParams):
        k_in = intrinsics_from_params(source)
        r = rotation_from_angles(source.phi_deg, source.psi_deg, 0.0)
        m = k_in.matrix @ r.T @ rot_y(layout.yaw(target)) @ k_view.inverse
    else:
        delta = ((target - source) % layout.num_views) * layout.yaw_step_deg
        m = k_view.matrix @ rot_y(delta) @ k_view.inverse
    return Homography(m)


def build_correspondence(source: Union[CameraParams, int], target: int,
                         layout: Optional[PanoLayout] = None) -> CorrespondenceMap:
    """Map every pixel of canonical view ``target`` to its point in ``source``.

    ``source`` is either the camera-free input (its :class:`CameraParams`)
    or another canonical view index.
    """
    layout = layout or PanoLayout()
    if isinstance(source, CameraParams):
        sw, sh, sid = source.width, source.height, INPUT_VIEW
    else:
        sw = sh = layout.view_size
        sid = int(source) % layout.num_views
    h = pair_homography(source, target, layout)
    return correspondence_from_homography(h, layout.view_size, layout.view_size, sw, sh,
                                          source_id=sid, target_id=int(target) % layout.num_views)


def correspondence_from_homography(h, target_width: int, target_height: int,
                                   source_width: int, source_height: int,
                                   source_id: int = INPUT_VIEW, target_id: int = 0) -> CorrespondenceMap:
    """Correspondence map induced by a target-to-source homography."""
    uu, vv = pixel_grid(target_width, target_height)
    su, sv, front = project_points(h, uu, vv)
    with np.errstate(invalid="ignore"):
        inside = (front & (su >= 0.0) & (su <= source_width - 1)
                  & (sv >= 0.0) & (sv <= source_height - 1))
    return CorrespondenceMap(su, sv, inside, source_id, target_id, source_width, source_height)


@dataclass(frozen=True)
class Neighborhood:
    positions: np.ndarray  # (K*K, 2) integer (u, v), row-major over the window
    valid: np.ndarray      # (K*K,) bool
    visible: bool


def _window_offsets(k: int):
    if k < 1 or k % 2 == 0:
        raise ValueError(f"neighbourhood size must be a positive odd integer, got {k}")
    r = k // 2
    dv, du = np.mgrid[-r:r + 1, -r:r + 1]
    return du.ravel(), dv.ravel()


def round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def gather_neighborhood(cmap: CorrespondenceMap, p_t, k: int) -> Neighborhood:
    """K x K integer window around the rounded source point of target pixel ``p_t``."""
    du, dv = _window_offsets(k)
    u, v = p_t
    if not cmap.visible[v, u]:
        return Neighborhood(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=bool), False)
    cu = round_half_up(cmap.src_u[v, u])
    cv = round_half_up(cmap.src_v[v, u])
    pu, pv = cu + du, cv + dv
    valid = (pu >= 0) & (pu < cmap.source_width) & (pv >= 0) & (pv < cmap.source_height)
    return Neighborhood(np.stack([pu, pv], axis=1), valid, True)


def gather_all_neighborhoods(cmap: CorrespondenceMap, k: int):
    """Vectorised :func:`gather_neighborhood` over every target pixel.

    Returns ``(pu, pv, valid)`` each of shape ``(H_t, W_t, K*K)``; windows of
    invisible targets are all invalid.
    """
    du, dv = _window_offsets(k)
    cu = round_half_up(np.where(cmap.visible, cmap.src_u, 0.0))
    cv = round_half_up(np.where(cmap.visible, cmap.src_v, 0.0))
    pu = cu[..., None] + du
    pv = cv[..., None] + dv
    valid = ((pu >= 0) & (pu < cmap.source_width) & (pv >= 0) & (pv < cmap.source_height)
             & cmap.visible[..., None])
    return pu, pv, valid


def save_cmap(cmap: CorrespondenceMap, path) -> None:
    """Little-endian binary: header, then one (f32 u, f32 v, u8 visible) record per target pixel."""
    header = _CMAP_HEADER.pack(CMAP_MAGIC, CMAP_VERSION, cmap.width, cmap.height,
                               cmap.source_id, cmap.target_id, cmap.source_width, cmap.source_height)
    rec = np.empty(cmap.width * cmap.height, dtype=_CMAP_RECORD)
    rec["u"] = cmap.src_u.ravel()
    rec["v"] = cmap.src_v.ravel()
    rec["visible"] = cmap.visible.ravel()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_cmap(path) -> CorrespondenceMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CMAP_HEADER.size:
        raise ValueError(f"{path}: truncated CMAP header")
    magic, version, w, h, sid, tid, sw, sh = _CMAP_HEADER.unpack_from(raw)
    if magic != CMAP_MAGIC:
        raise ValueError(f"{path}: not a CMAP file")
    if version != CMAP_VERSION:
        raise ValueError(f"{path}: unsupported CMAP version {version}")
    rec = np.frombuffer(raw, dtype=_CMAP_RECORD, offset=_CMAP_HEADER.size)
    if rec.size != w * h:
        raise ValueError(f"{path}: expected {w * h} records, found {rec.size}")
    su = rec["u"].astype(np.float64).reshape(h, w)
    sv = rec["v"].astype(np.float64).reshape(h, w)
    return CorrespondenceMap(su, sv, rec["visible"].astype(bool).reshape(h, w), sid, tid, sw, sh)
