"""Correspondence-aware attention: forward pass and analytic gradients.

Each visible target pixel ``p_t`` attends over the K x K window of source
features around its corresponding source point::

    M(p_t) = sum_s softmax_s( (W_Q f_t) . (W_K f_s) ) W_V f_s

No 1/sqrt(d) factor is applied unless ``scale`` is set.  Window entries
that fall outside the source grid are dropped from the softmax.
Invisible targets produce zeros and are flagged as skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .pano import CorrespondenceMap, gather_all_neighborhoods


class CaaConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CaaTensors:
    target: np.ndarray   # (H_t, W_t, d)
    source: np.ndarray   # (H_s, W_s, d)
    w_q: np.ndarray      # (d, d)
    w_k: np.ndarray
    w_v: np.ndarray
    k: int = 3
    scale: float = 1.0

    @property
    def dim(self) -> int:
        return self.target.shape[-1]

    def replace(self, **changes) -> "CaaTensors":
        fields = dict(target=self.target, source=self.source, w_q=self.w_q, w_k=self.w_k,
                      w_v=self.w_v, k=self.k, scale=self.scale)
        fields.update(changes)
        return CaaTensors(**fields)


class CaaOutput(NamedTuple):
    values: np.ndarray   # (H_t, W_t, d)
    skipped: np.ndarray  # (H_t, W_t) bool


class CaaGrads(NamedTuple):
    target: np.ndarray
    source: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray


def masked_softmax(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``valid``; rows with no valid entry are all zero."""
    masked = np.where(valid, logits, -np.inf)
    peak = masked.max(axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(valid, np.exp(masked - peak), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def attend(query: np.ndarray, keys: np.ndarray, values: np.ndarray, valid: np.ndarray,
           scale: float = 1.0):
    """Single-query attention over a padded set of neighbours.

    Args:
        query: ``(N, d)`` projected queries.
        keys, values: ``(N, n, d)`` projected neighbour keys and values.
        valid: ``(N, n)`` support mask.

    Returns:
        ``(out, weights)`` with shapes ``(N, d)`` and ``(N, n)``.
    """
    logits = scale * np.einsum("nd,nkd->nk", query, keys)
    weights = masked_softmax(logits, valid)
    return np.einsum("nk,nkd->nd", weights, values), weights


def _check(t: CaaTensors, cmap: CorrespondenceMap) -> None:
    if t.k < 1 or t.k % 2 == 0:
        raise CaaConfigError(f"K must be a positive odd integer, got {t.k}")
    if t.target.ndim != 3 or t.source.ndim != 3:
        raise CaaConfigError("feature grids must be H x W x d")
    d = t.target.shape[-1]
    if d < 1 or t.source.shape[-1] != d:
        raise CaaConfigError(f"feature dims differ: target {t.target.shape[-1]}, source {t.source.shape[-1]}")
    for name in ("w_q", "w_k", "w_v"):
        if getattr(t, name).shape != (d, d):
            raise CaaConfigError(f"{name} must be {d}x{d}, got {getattr(t, name).shape}")
    if t.target.shape[:2] != (cmap.height, cmap.width):
        raise CaaConfigError(f"target grid {t.target.shape[:2]} does not match map {(cmap.height, cmap.width)}")
    if t.source.shape[:2] != (cmap.source_height, cmap.source_width):
        raise CaaConfigError(f"source grid {t.source.shape[:2]} does not match map source "
                             f"{(cmap.source_height, cmap.source_width)}")


def _gather(t: CaaTensors, cmap: CorrespondenceMap):
    pu, pv, valid = gather_all_neighborhoods(cmap, t.k)
    rows, cols = np.nonzero(cmap.visible)
    flat = np.where(valid, pv * cmap.source_width + pu, 0)[rows, cols]
    return rows, cols, flat, valid[rows, cols]


def caa_forward(t: CaaTensors, cmap: CorrespondenceMap) -> CaaOutput:
    _check(t, cmap)
    d = t.dim
    rows, cols, flat, valid = _gather(t, cmap)
    src = t.source.reshape(-1, d)
    q = t.target[rows, cols] @ t.w_q.T
    keys = (src @ t.w_k.T)[flat]
    vals = (src @ t.w_v.T)[flat]
    out, _ = attend(q, keys, vals, valid, t.scale)
    values = np.zeros(t.target.shape)
    values[rows, cols] = out
    return CaaOutput(values, ~cmap.visible)


def caa_backward(t: CaaTensors, cmap: CorrespondenceMap, upstream: np.ndarray) -> CaaGrads:
    """Gradients of ``sum(upstream * caa_forward(t, cmap).values)``.

    Scatter-adds into the source grid go through ``np.add.at`` in target
    raster order, so the accumulation order is fixed.
    """
    _check(t, cmap)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != t.target.shape:
        raise CaaConfigError(f"upstream gradient shape {upstream.shape} != output {t.target.shape}")
    d = t.dim
    rows, cols, flat, valid = _gather(t, cmap)
    src = t.source.reshape(-1, d)
    x_t = t.target[rows, cols]
    q = x_t @ t.w_q.T
    keys = (src @ t.w_k.T)[flat]
    vals = (src @ t.w_v.T)[flat]
    _, a = attend(q, keys, vals, valid, t.scale)
    g = upstream[rows, cols]

    da = np.einsum("nd,nkd->nk", g, vals)
    dlogit = a * (da - np.sum(a * da, axis=1, keepdims=True))
    dlogit = np.where(valid, dlogit, 0.0)
    dq = t.scale * np.einsum("nk,nkd->nd", dlogit, keys)
    dkeys = t.scale * dlogit[:, :, None] * q[:, None, :]
    dvals = a[:, :, None] * g[:, None, :]

    dk_src = np.zeros_like(src)
    dv_src = np.zeros_like(src)
    sel = valid.ravel()
    np.add.at(dk_src, flat.ravel()[sel], dkeys.reshape(-1, d)[sel])
    np.add.at(dv_src, flat.ravel()[sel], dvals.reshape(-1, d)[sel])

    grad_target = np.zeros(t.target.shape)
    grad_target[rows, cols] = dq @ t.w_q
    grad_source = (dk_src @ t.w_k + dv_src @ t.w_v).reshape(t.source.shape)
    return CaaGrads(
        target=grad_target,
        source=grad_source,
        w_q=dq.T @ x_t,
        w_k=dk_src.T @ src,
        w_v=dv_src.T @ src,
    )
