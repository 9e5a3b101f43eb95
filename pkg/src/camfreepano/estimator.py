"""Desk-scale camera estimator: frozen random conv features + a SiLU MLP with three heads.

The MLP predicts (fov, phi, psi) either as classification over 1-degree
bins (cross-entropy) or as range-normalised regression (MSE).  Only the
MLP is trained; the feature extractor is fixed by its seed.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .geometry import CameraParams
from .raster import ImageRaster

log = logging.getLogger(__name__)

CE = "ce"
MSE = "mse"
OBJECTIVES = (CE, MSE)

# published per-objective MAE (fov, phi, psi) of the full-size model; reported, never asserted
REFERENCE_MAE = {CE: (7.9, 1.8, 1.5), MSE: (10.6, 2.5, 2.4)}

HEADS = ("fov", "phi", "psi")


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class BinSpec:
    lo: float
    hi: float
    step: float

    def __post_init__(self):
        n = (self.hi - self.lo) / self.step
        if self.step <= 0 or abs(n - round(n)) > 1e-9 or round(n) + 1 < 2:
            raise ValueError(f"invalid bins lo={self.lo} hi={self.hi} step={self.step}")

    @property
    def count(self) -> int:
        return int(round((self.hi - self.lo) / self.step)) + 1

    @property
    def centers(self) -> np.ndarray:
        return self.lo + self.step * np.arange(self.count)

    def index_of(self, value) -> np.ndarray:
        idx = np.floor((np.asarray(value, dtype=np.float64) - self.lo) / self.step + 0.5)
        return np.clip(idx, 0, self.count - 1).astype(np.int64)

    def contains(self, value: float, tol: float = 1e-9) -> bool:
        return self.lo - tol <= value <= self.hi + tol


DEFAULT_BINS = (BinSpec(60.0, 110.0, 1.0), BinSpec(-15.0, 15.0, 1.0), BinSpec(-15.0, 15.0, 1.0))


@dataclass
class TrainConfig:
    objective: str = CE
    bins: Tuple[BinSpec, BinSpec, BinSpec] = DEFAULT_BINS
    epochs: int = 30
    learning_rate: float = 2e-4
    batch_size: int = 32
    seed: int = 0
    hidden: Tuple[int, int, int] = (256, 128, 64)
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    image_size: int = 128
    feature_seed: int = 1234

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


# ---------------------------------------------------------------------------
# frozen feature extractor

_CONV_LAYERS = ((3, 16, 5), (16, 32, 3), (32, 64, 3))  # (in, out, kernel), all stride 2
POOL_GRID = 4
FEATURE_DIM = _CONV_LAYERS[-1][1] * POOL_GRID * POOL_GRID


def _conv_stride2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """'Same'-padded stride-2 convolution of a batch ``(N, H, W, C)`` via im2col."""
    n, h, wd, c = x.shape
    cout, k = w.shape[0], w.shape[1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = (h + 1) // 2, (wd + 1) // 2
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2, :]
    out = cols.reshape(n * ho * wo, k * k * c) @ w.reshape(cout, -1).T + b
    return out.reshape(n, ho, wo, cout)


class FeatureExtractor:
    """Three random stride-2 conv layers (ReLU) followed by 4x4 average pooling.

    Weights are drawn once from ``seed`` and never trained.  The output
    length is 64 channels x 16 cells = 1024.
    """

    def __init__(self, image_size: int = 128, seed: int = 1234, weights: Optional[List[np.ndarray]] = None):
        if image_size % (2 ** len(_CONV_LAYERS) * POOL_GRID):
            raise EstimatorError(f"image size must be a multiple of {2 ** len(_CONV_LAYERS) * POOL_GRID}")
        self.image_size = image_size
        self.seed = seed
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = []
            for cin, cout, k in _CONV_LAYERS:
                w = rng.normal(size=(cout, k, k, cin))
                w -= w.mean(axis=(1, 2, 3), keepdims=True)
                w /= np.sqrt((w ** 2).sum(axis=(1, 2, 3), keepdims=True))
                weights.append(w.astype(np.float32))
                weights.append((0.1 * rng.normal(size=cout)).astype(np.float32))
        self.weights = [np.asarray(w, dtype=np.float32) for w in weights]

    def __call__(self, images: Sequence[ImageRaster], batch: int = 64) -> np.ndarray:
        out = []
        for start in range(0, len(images), batch):
            chunk = images[start:start + batch]
            for img in chunk:
                if img.width != self.image_size or img.height != self.image_size or img.channels != 3:
                    raise EstimatorError(
                        f"expected {self.image_size}x{self.image_size} RGB, got "
                        f"{img.width}x{img.height}x{img.channels}")
            x = np.stack([img.data for img in chunk]).astype(np.float64) - 0.5
            for i in range(0, len(self.weights), 2):
                x = np.maximum(_conv_stride2(x, self.weights[i].astype(np.float64),
                                             self.weights[i + 1].astype(np.float64)), 0.0)
            n, h, w, c = x.shape
            cell = h // POOL_GRID
            pooled = x.reshape(n, POOL_GRID, cell, POOL_GRID, cell, c).mean(axis=(2, 4))
            out.append(pooled.reshape(n, -1))
        return np.concatenate(out, axis=0) if out else np.zeros((0, FEATURE_DIM))


def extract_features(img: ImageRaster, extractor: Optional[FeatureExtractor] = None) -> np.ndarray:
    extractor = extractor or FeatureExtractor(img.width)
    return extractor([img])[0]


# ---------------------------------------------------------------------------
# MLP


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class EstimatorModel:
    objective: str
    bins: Tuple[BinSpec, BinSpec, BinSpec]
    extractor: FeatureExtractor
    feat_mean: np.ndarray
    feat_std: np.ndarray
    layers: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def image_size(self) -> int:
        return self.extractor.image_size

    @property
    def head_sizes(self) -> Tuple[int, int, int]:
        if self.objective == CE:
            return tuple(b.count for b in self.bins)
        return (1, 1, 1)

    def parameters(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in layer]

    def logits(self, features: np.ndarray) -> List[np.ndarray]:
        """Per-head outputs for a batch of raw features."""
        h = (features - self.feat_mean) / self.feat_std
        for w, b in self.layers[:-1]:
            h = _silu(h @ w.astype(np.float64) + b.astype(np.float64))
        w, b = self.layers[-1]
        out = h @ w.astype(np.float64) + b.astype(np.float64)
        return np.split(out, np.cumsum(self.head_sizes)[:-1], axis=1)


def init_model(cfg: TrainConfig, feat_mean: np.ndarray, feat_std: np.ndarray,
               extractor: FeatureExtractor) -> EstimatorModel:
    rng = np.random.default_rng(cfg.seed)
    model = EstimatorModel(cfg.objective, tuple(cfg.bins), extractor, feat_mean, feat_std)
    sizes = [feat_mean.size, *cfg.hidden, sum(model.head_sizes)]
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(scale=math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        model.layers.append((w, np.zeros(fan_out)))
    w, b = model.layers[-1]
    model.layers[-1] = (w * 0.1, b)
    return model


def _targets(cfg_bins, params: Sequence[CameraParams], objective: str):
    values = np.array([[p.fov_deg, p.phi_deg, p.psi_deg] for p in params])
    if objective == CE:
        return [b.index_of(values[:, i]) for i, b in enumerate(cfg_bins)]
    return [((values[:, i] - b.lo) / (b.hi - b.lo))[:, None] for i, b in enumerate(cfg_bins)]


def _loss_and_grads(model: EstimatorModel, x: np.ndarray, targets) -> Tuple[float, List[np.ndarray], List[float]]:
    """Loss (sum over heads of the per-head mean) and parameter gradients."""
    acts = [x]
    pre = []
    h = x
    for w, b in model.layers[:-1]:
        z = h @ w + b
        pre.append(z)
        h = _silu(z)
        acts.append(h)
    w_out, b_out = model.layers[-1]
    out = h @ w_out + b_out
    n = x.shape[0]
    splits = np.cumsum(model.head_sizes)[:-1]
    heads = np.split(out, splits, axis=1)
    grads_out = []
    head_losses = []
    for logits, tgt in zip(heads, targets):
        if model.objective == CE:
            logp = _log_softmax(logits)
            head_losses.append(float(-logp[np.arange(n), tgt].mean()))
            g = np.exp(logp)
            g[np.arange(n), tgt] -= 1.0
            grads_out.append(g / n)
        else:
            diff = logits - tgt
            head_losses.append(float(np.mean(diff ** 2)))
            grads_out.append(2.0 * diff / n)
    dout = np.concatenate(grads_out, axis=1)

    grads = [None] * (2 * len(model.layers))
    grads[-2] = acts[-1].T @ dout
    grads[-1] = dout.sum(axis=0)
    dh = dout @ w_out.T
    for li in range(len(model.layers) - 2, -1, -1):
        dz = dh * _silu_grad(pre[li])
        grads[2 * li] = acts[li].T @ dz
        grads[2 * li + 1] = dz.sum(axis=0)
        if li:
            dh = dz @ model.layers[li][0].T
    return sum(head_losses), grads, head_losses


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: List[np.ndarray]):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            if cfg.optimizer == "sgd":
                m *= cfg.momentum
                m += g
                p -= cfg.learning_rate * m
            else:
                m *= 0.9
                m += 0.1 * g
                v *= 0.999
                v += 0.001 * g * g
                mhat = m / (1 - 0.9 ** self.t)
                vhat = v / (1 - 0.999 ** self.t)
                p -= cfg.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)


class Prediction(NamedTuple):
    fov_deg: float
    phi_deg: float
    psi_deg: float
    confidence: Tuple[float, float, float]

    def params(self, width: int, height: int) -> CameraParams:
        return CameraParams(self.fov_deg, self.phi_deg, self.psi_deg, width, height)


def _decode(model: EstimatorModel, heads: List[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Batch decode to ``(values (N, 3), confidence (N, 3))``."""
    n = heads[0].shape[0]
    values = np.empty((n, 3))
    conf = np.empty((n, 3))
    for i, (logits, b) in enumerate(zip(heads, model.bins)):
        if model.objective == CE:
            idx = np.argmax(logits, axis=1)  # first maximum wins ties
            p = np.exp(_log_softmax(logits))
            values[:, i] = b.centers[idx]
            conf[:, i] = p[np.arange(n), idx]
        else:
            values[:, i] = np.clip(b.lo + logits[:, 0] * (b.hi - b.lo), b.lo, b.hi)
            conf[:, i] = 1.0
    return values, conf


def predict_features(model: EstimatorModel, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return _decode(model, model.logits(np.atleast_2d(features)))


def predict(model: EstimatorModel, img: ImageRaster) -> Prediction:
    """Estimate (fov, phi, psi) of a single image."""
    if img.width != model.image_size or img.height != model.image_size:
        raise EstimatorError(f"model expects {model.image_size}x{model.image_size} input, "
                             f"got {img.width}x{img.height}")
    values, conf = predict_features(model, model.extractor([img]))
    return Prediction(float(values[0, 0]), float(values[0, 1]), float(values[0, 2]),
                      tuple(float(c) for c in conf[0]))


def mae(pred: np.ndarray, params: Sequence[CameraParams]) -> Tuple[float, float, float]:
    truth = np.array([[p.fov_deg, p.phi_deg, p.psi_deg] for p in params])
    err = np.abs(pred - truth).mean(axis=0)
    return float(err[0]), float(err[1]), float(err[2])


def evaluate_mae(model: EstimatorModel, dataset, features: Optional[np.ndarray] = None):
    """Mean absolute error in degrees per head over ``(image, params)`` pairs."""
    if len(dataset) == 0:
        raise EstimatorError("cannot evaluate on an empty dataset")
    if features is None:
        features = model.extractor([img for img, _ in dataset])
    values, _ = predict_features(model, features)
    return mae(values, [p for _, p in dataset])


def _check_dataset(dataset, bins) -> None:
    if len(dataset) == 0:
        raise EstimatorError("training dataset is empty")
    for _, p in dataset:
        for b, v, name in zip(bins, (p.fov_deg, p.phi_deg, p.psi_deg), HEADS):
            if not b.contains(v):
                raise EstimatorError(f"{name} label {v} outside [{b.lo}, {b.hi}]")


def train(dataset, cfg: Optional[TrainConfig] = None, val=None,
          features: Optional[np.ndarray] = None, val_features: Optional[np.ndarray] = None,
          max_steps: Optional[int] = None, history: Optional[list] = None) -> EstimatorModel:
    """Train the MLP on ``(image, CameraParams)`` pairs.

    Features are extracted once (pass ``features`` to reuse a cache).  The
    returned model is the epoch with the lowest validation MAE sum (training
    MAE when ``val`` is None), with parameters rounded to float32 so that a
    saved model predicts exactly like the in-memory one.

    ``history`` (if given) receives one dict per step with the batch loss.
    """
    cfg = cfg or TrainConfig()
    _check_dataset(dataset, cfg.bins)
    extractor = FeatureExtractor(cfg.image_size, cfg.feature_seed)
    if features is None:
        features = extractor([img for img, _ in dataset])
    labels = [p for _, p in dataset]
    mean = features.mean(axis=0)
    std = features.std(axis=0) + 1e-6
    model = init_model(cfg, mean, std, extractor)
    x_all = (features - mean) / std
    targets = _targets(cfg.bins, labels, cfg.objective)
    params = model.parameters()
    opt = _Optimizer(cfg, params)
    rng = np.random.default_rng(cfg.seed + 1)

    if val is not None and len(val):
        if val_features is None:
            val_features = extractor([img for img, _ in val])
        val_labels = [p for _, p in val]
    else:
        val_features, val_labels = features, labels

    best_score, best_params = math.inf, None
    step = 0
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, head_losses = _loss_and_grads(model, x_all[idx], [t[idx] for t in targets])
            opt.step(params, grads)
            if history is not None:
                history.append({"epoch": epoch, "step": step, "loss": loss, "heads": head_losses})
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        score = sum(mae(predict_features(model, val_features)[0], val_labels))
        log.info("epoch %d: val MAE sum %.3f", epoch, score)
        if score < best_score:
            best_score = score
            best_params = [p.copy() for p in params]
        if max_steps is not None and step >= max_steps:
            break

    model.layers = [(best_params[i].astype(np.float32), best_params[i + 1].astype(np.float32))
                    for i in range(0, len(best_params), 2)]
    model.feat_mean = model.feat_mean.astype(np.float32)
    model.feat_std = model.feat_std.astype(np.float32)
    return model


# ---------------------------------------------------------------------------
# serialisation

MODEL_MAGIC = b"CFDE"
MODEL_VERSION = 1


def save_model(model: EstimatorModel, path) -> None:
    """Little-endian binary: magic, version, objective, bins, image size, then shaped f32 arrays."""
    arrays = list(model.extractor.weights) + [model.feat_mean, model.feat_std] + model.parameters()
    chunks = [MODEL_MAGIC, struct.pack("<IB", MODEL_VERSION, OBJECTIVES.index(model.objective))]
    for b in model.bins:
        chunks.append(struct.pack("<ddd", b.lo, b.hi, b.step))
    chunks.append(struct.pack("<IqII", model.image_size, model.extractor.seed,
                              len(model.extractor.weights), len(arrays)))
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f4")
        chunks.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_model(path) -> EstimatorModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise EstimatorError(f"{path}: not a CFDE model file")
    try:
        off = 4
        version, obj = struct.unpack_from("<IB", raw, off)
        off += 5
        if version != MODEL_VERSION:
            raise EstimatorError(f"{path}: unsupported model version {version}")
        bins = []
        for _ in range(3):
            bins.append(BinSpec(*struct.unpack_from("<ddd", raw, off)))
            off += 24
        size, fseed, n_ext, n_arr = struct.unpack_from("<IqII", raw, off)
        off += 20
        arrays = []
        for _ in range(n_arr):
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            a = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
            off += 4 * count
            arrays.append(a)
    except (struct.error, ValueError) as exc:
        raise EstimatorError(f"{path}: truncated model file") from exc
    if off != len(raw):
        raise EstimatorError(f"{path}: trailing bytes in model file")
    extractor = FeatureExtractor(size, fseed, arrays[:n_ext])
    mean, std = arrays[n_ext], arrays[n_ext + 1]
    rest = arrays[n_ext + 2:]
    layers = [(rest[i], rest[i + 1]) for i in range(0, len(rest), 2)]
    return EstimatorModel(OBJECTIVES[obj], tuple(bins), extractor, mean, std, layers)
