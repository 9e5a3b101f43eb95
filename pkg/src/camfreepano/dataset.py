"""Random-warp dataset generation and JSON-lines manifests."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .geometry import CameraParams
from .pano import PanoLayout, equirect_to_views
from .raster import ImageRaster, random_warp, read_png, write_png
from .synth import room_panorama

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


def warp_seed(seed: int, *keys: int) -> int:
    """Stable per-sample seed derived from the run seed and the sample's indices."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def views_of(img: ImageRaster, layout: PanoLayout) -> List[ImageRaster]:
    """Slice a 2:1 panorama, or pass a square pre-sliced view through."""
    if img.width == 2 * img.height:
        return equirect_to_views(img, layout)
    if img.width == img.height == layout.view_size:
        return [img]
    raise ValueError(f"expected a 2:1 panorama or a {layout.view_size}px square view, "
                     f"got {img.width}x{img.height}")


def warp_views(views: List[ImageRaster], n_per_view: int, seed: int, source_index: int):
    """Yield ``(view_index, k, warped, params)`` for every requested warp."""
    for vi, view in enumerate(views):
        for k in range(n_per_view):
            warped, params = random_warp(view, warp_seed(seed, source_index, vi, k))
            yield vi, k, warped, params


def synthetic_samples(n_panos: int, n_per_view: int, view_size: int, seed: int,
                      first_pano: int = 0) -> List[Tuple[ImageRaster, CameraParams]]:
    """In-memory dataset of random warps of procedural room panoramas."""
    layout = PanoLayout(view_size=view_size)
    out = []
    for i in range(first_pano, first_pano + n_panos):
        pano = room_panorama(2 * view_size, warp_seed(seed, 0x5EED, i))
        for _, _, warped, params in warp_views(equirect_to_views(pano, layout), n_per_view, seed, i):
            out.append((warped, params))
    return out


def write_dataset(out_dir, sources: Iterable[Tuple[str, ImageRaster]], n_per_view: int, seed: int,
                  layout: PanoLayout) -> Tuple[Path, List[str]]:
    """Warp every source, write PNGs + params sidecars + manifest.

    Returns the manifest path and a list of per-source error messages
    (bad sources are skipped, not fatal).
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    errors = []
    lines = []
    for idx, (name, img) in enumerate(sources):
        try:
            views = views_of(img, layout)
        except ValueError as exc:
            errors.append(f"{name}: {exc}")
            log.warning("skipping %s: %s", name, exc)
            continue
        for vi, k, warped, params in warp_views(views, n_per_view, seed, idx):
            stem = f"{name}_v{vi}_w{k}"
            write_png(warped, img_dir / f"{stem}.png")
            params.save(img_dir / f"{stem}.params.json")
            lines.append(json.dumps({"image": f"images/{stem}.png", "params": f"images/{stem}.params.json"}))
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest, errors


def read_manifest(path) -> List[Tuple[Path, Path]]:
    path = Path(path)
    base = path.parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append((base / rec["image"], base / rec["params"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return entries


def load_manifest(path, limit: Optional[int] = None) -> List[Tuple[ImageRaster, CameraParams]]:
    entries = read_manifest(path)
    if limit is not None:
        entries = entries[:limit]
    return [(read_png(img), CameraParams.load(params)) for img, params in entries]
