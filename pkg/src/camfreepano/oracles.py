"""Independent reference computations used by the verification suites.

Nothing here shares code paths with the production operators: the DLT
solver knows nothing about camera parameters, and the attention oracle is
a scalar loop with its own neighbourhood walk.
"""

from __future__ import annotations

import math

import numpy as np


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Homography ``H`` with ``dst ~ H @ src`` from >= 4 point pairs (Hartley-normalised DLT)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.shape[0] < 4:
        raise ValueError("need at least 4 matching point pairs")

    def normaliser(pts):
        c = pts.mean(axis=0)
        s = math.sqrt(2.0) / np.mean(np.linalg.norm(pts - c, axis=1))
        return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])

    ts, td = normaliser(src), normaliser(dst)
    ps = (ts @ np.column_stack([src, np.ones(len(src))]).T).T
    pd = (td @ np.column_stack([dst, np.ones(len(dst))]).T).T
    rows = []
    for (x, y, _), (u, v, _) in zip(ps, pd):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    return h / h[2, 2]


def naive_caa(target, source, w_q, w_k, w_v, src_u, src_v, visible, k, scale=1.0):
    """Scalar-loop correspondence-aware attention.

    ``src_u``/``src_v`` hold each target pixel's source coordinate; the
    window is centred on ``floor(x + 0.5)``.
    """
    ht, wt, d = target.shape
    hs, ws, _ = source.shape
    r = k // 2
    out = np.zeros((ht, wt, d))
    for ty in range(ht):
        for tx in range(wt):
            if not visible[ty][tx]:
                continue
            cu = math.floor(src_u[ty][tx] + 0.5)
            cv = math.floor(src_v[ty][tx] + 0.5)
            q = [sum(w_q[i][j] * target[ty][tx][j] for j in range(d)) for i in range(d)]
            logits, vals = [], []
            for dv in range(-r, r + 1):
                for du in range(-r, r + 1):
                    su, sv = cu + du, cv + dv
                    if not (0 <= su < ws and 0 <= sv < hs):
                        continue
                    f = source[sv][su]
                    key = [sum(w_k[i][j] * f[j] for j in range(d)) for i in range(d)]
                    vals.append([sum(w_v[i][j] * f[j] for j in range(d)) for i in range(d)])
                    logits.append(scale * sum(q[i] * key[i] for i in range(d)))
            if not logits:
                continue
            top = max(logits)
            ex = [math.exp(x - top) for x in logits]
            z = sum(ex)
            for i in range(d):
                out[ty, tx, i] = sum(e / z * val[i] for e, val in zip(ex, vals))
    return out


def central_difference(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``x`` by central differences (``x`` is not modified)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = fn(x)
        flat[i] = keep - step
        down = fn(x)
        flat[i] = keep
        g[i] = (up - down) / (2.0 * step)
    return grad


def grad_relative_error(analytic: np.ndarray, numeric: np.ndarray, rel_floor: float = 1e-4) -> float:
    """Max entrywise relative error between two gradient tensors.

    Entries are compared against ``max(|a|, |n|, rel_floor * max|a|)`` so
    that near-zero entries, where central differences only carry
    round-off noise, do not dominate.
    """
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    if not a.size:
        return 0.0
    floor = max(rel_floor * float(np.max(np.abs(a))), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def uniform_guess_mae(lo: float, hi: float) -> float:
    """Expected |X - Y| for X, Y independent and uniform on [lo, hi]."""
    return (hi - lo) / 3.0
