"""Tiny conv classifier / segmenter with hand-written backward passes and losses.

Images are NHWC. Every conv is 3x3, zero padded ("same" at stride 1) and
followed by ReLU. The classifier ends in global max-pooling and a linear
layer giving one raw logit per class. The segmenter gives per-pixel logits
from a 1x1 projection of the last feature map, plus (by default) a projection
of its global max-pool broadcast to every pixel, which is what lets a pixel's
label depend on objects far away.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import formats
from .scenegen import IGNORE, label_of

TASKS = ("classifier", "segmenter")


class TrainingDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    task: str
    n_outputs: int
    channels: tuple[int, ...] = (16, 16)
    strides: tuple[int, ...] = ()
    in_channels: int = 3
    height: int = 64
    width: int = 64
    global_context: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if len(self.channels) == 0:
            raise ValueError("architecture needs at least one conv layer")
        if not self.strides:
            object.__setattr__(self, "strides", (1,) * len(self.channels))
        if len(self.strides) != len(self.channels):
            raise ValueError("strides and channels must have the same length")
        if self.task == "segmenter" and any(s != 1 for s in self.strides):
            raise ValueError("segmenter convs must have stride 1")
        if self.n_outputs < 1 or min(self.channels) < 1:
            raise ValueError("channel and output counts must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["strides"] = tuple(d.get("strides", ()))
        return cls(**d)


def layout(arch: ArchDescriptor) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    cin = arch.in_channels
    for i, cout in enumerate(arch.channels):
        shapes.append((f"conv{i}.w", (cin, 3, 3, cout)))
        shapes.append((f"conv{i}.b", (cout,)))
        cin = cout
    k = arch.n_outputs
    if arch.task == "classifier":
        shapes += [("head.w", (cin, k)), ("head.b", (k,))]
    else:
        shapes.append(("head.w_local", (cin, k)))
        if arch.global_context:
            shapes.append(("head.w_global", (cin, k)))
        shapes.append(("head.b", (k,)))
    return shapes


def n_params(arch: ArchDescriptor) -> int:
    return sum(math.prod(s) for _, s in layout(arch))


@dataclass
class ParameterVector:
    values: np.ndarray
    arch: ArchDescriptor
    seed: int = 0

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.size != n_params(self.arch):
            raise ValueError(f"parameter vector has {self.values.size} entries, arch needs {n_params(self.arch)}")

    def unpack(self, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Named views into ``flat`` (defaults to ``values``)."""
        flat = self.values if flat is None else flat
        out, offset = {}, 0
        for name, shape in layout(self.arch):
            size = math.prod(shape)
            out[name] = flat[offset : offset + size].reshape(shape)
            offset += size
        return out

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values=values, arch=self.arch, seed=self.seed)

    def astype(self, dtype) -> "ParameterVector":
        return self.with_values(self.values.astype(dtype))


def init_params(arch: ArchDescriptor, seed: int, dtype=np.float32) -> ParameterVector:
    """Fan-in scaled uniform weights (He bound for convs), zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in layout(arch):
        if name.endswith(".b"):
            parts.append(np.zeros(shape))
            continue
        fan_in = math.prod(shape[:-1])
        bound = math.sqrt(6.0 / fan_in) if name.startswith("conv") else math.sqrt(1.0 / fan_in)
        parts.append(rng.uniform(-bound, bound, size=shape))
    values = np.concatenate([p.ravel() for p in parts]).astype(dtype)
    return ParameterVector(values=values, arch=arch, seed=seed)


# -- forward / backward ----------------------------------------------------------

def _conv_forward(x, w, b, stride):
    n, _, _, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    cols = win.reshape(n * ho * wo, c * 9)
    out = cols @ w.reshape(c * 9, -1) + b
    return out.reshape(n, ho, wo, -1), cols


def _conv_backward(dout, cols, w, x_shape, stride, need_dx):
    n, ho, wo, cout = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    _, h, wd, c = x_shape
    dcols = (d2 @ w.reshape(c * 9, cout).T).reshape(n, ho, wo, c, 3, 3)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[..., i, j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _global_max(feats):
    n, h, w, c = feats.shape
    flat = feats.reshape(n, h * w, c)
    idx = flat.argmax(axis=1)  # first maximum on ties
    return np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :], idx


def _scatter_max(dpooled, idx, shape):
    n, h, w, c = shape
    out = np.zeros((n, h * w, c), dtype=dpooled.dtype)
    np.put_along_axis(out, idx[:, None, :], dpooled[:, None, :], axis=1)
    return out.reshape(shape)


@dataclass
class ForwardCache:
    batched: bool
    inputs: list = field(default_factory=list)
    cols: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    feats: np.ndarray | None = None
    pooled: np.ndarray | None = None
    argmax: np.ndarray | None = None


def _as_batch(params: ParameterVector, images: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(images)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    a = params.arch
    if x.ndim != 4 or x.shape[1:] != (a.height, a.width, a.in_channels):
        raise ValueError(f"expected images of shape (N,) {a.height}x{a.width}x{a.in_channels}, got {np.shape(images)}")
    return x.astype(params.values.dtype, copy=False), batched


def _trunk(params: ParameterVector, x: np.ndarray, cache: ForwardCache) -> np.ndarray:
    p = params.unpack()
    for i, stride in enumerate(params.arch.strides):
        cache.inputs.append(x.shape)
        z, cols = _conv_forward(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride)
        cache.cols.append(cols)
        cache.pre.append(z)
        x = np.maximum(z, 0)
    return x


def classifier_apply(params: ParameterVector, images: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Raw logits, shape (K,) for one image or (N, K) for a batch."""
    if params.arch.task != "classifier":
        raise ValueError("parameters do not describe a classifier")
    x, batched = _as_batch(params, images)
    cache = ForwardCache(batched=batched)
    feats = _trunk(params, x, cache)
    pooled, idx = _global_max(feats)
    cache.feats, cache.pooled, cache.argmax = feats, pooled, idx
    p = params.unpack()
    logits = pooled @ p["head.w"] + p["head.b"]
    return (logits if batched else logits[0]), cache


def segmenter_apply(params: ParameterVector, images: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Per-pixel logits, shape (H, W, K) for one image or (N, H, W, K)."""
    if params.arch.task != "segmenter":
        raise ValueError("parameters do not describe a segmenter")
    x, batched = _as_batch(params, images)
    cache = ForwardCache(batched=batched)
    feats = _trunk(params, x, cache)
    p = params.unpack()
    logits = feats @ p["head.w_local"] + p["head.b"]
    cache.feats = feats
    if params.arch.global_context:
        pooled, idx = _global_max(feats)
        cache.pooled, cache.argmax = pooled, idx
        logits = logits + (pooled @ p["head.w_global"])[:, None, None, :]
    return (logits if batched else logits[0]), cache


def apply(params: ParameterVector, images: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    if params.arch.task == "classifier":
        return classifier_apply(params, images)
    return segmenter_apply(params, images)


def predict_labels(params: ParameterVector, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax label rasters from a segmenter."""
    images = np.asarray(images)
    out = [segmenter_apply(params, images[i : i + batch_size])[0].argmax(axis=-1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out).astype(np.uint16)


def backward(params: ParameterVector, cache: ForwardCache, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dlogits * logits)`` with respect to the flat parameters."""
    dtype = params.values.dtype
    dlogits = np.asarray(dlogits, dtype=dtype)
    if not cache.batched:
        dlogits = dlogits[None]
    p = params.unpack()
    grad = np.zeros_like(params.values)
    g = params.unpack(grad)
    feats = cache.feats
    if params.arch.task == "classifier":
        g["head.w"][...] = cache.pooled.T @ dlogits
        g["head.b"][...] = dlogits.sum(axis=0)
        dfeats = _scatter_max(dlogits @ p["head.w"].T, cache.argmax, feats.shape)
    else:
        k = params.arch.n_outputs
        c = feats.shape[-1]
        g["head.w_local"][...] = feats.reshape(-1, c).T @ dlogits.reshape(-1, k)
        g["head.b"][...] = dlogits.sum(axis=(0, 1, 2))
        dfeats = dlogits @ p["head.w_local"].T
        if params.arch.global_context:
            dglob = dlogits.sum(axis=(1, 2))
            g["head.w_global"][...] = cache.pooled.T @ dglob
            dfeats = dfeats + _scatter_max(dglob @ p["head.w_global"].T, cache.argmax, feats.shape)
    d = dfeats
    for i in reversed(range(len(params.arch.strides))):
        d = d * (cache.pre[i] > 0)
        d, dw, db = _conv_backward(d, cache.cols[i], p[f"conv{i}.w"], cache.inputs[i],
                                   params.arch.strides[i], need_dx=i > 0)
        g[f"conv{i}.w"][...] = dw
        g[f"conv{i}.b"][...] = db
    return grad


# -- losses -----------------------------------------------------------------------

@dataclass
class LossBundle:
    loss: float
    grad: np.ndarray
    breakdown: dict[str, float] = field(default_factory=lambda: {"bce": 0.0, "hinge": 0.0, "seg_ce": 0.0, "seg_neg": 0.0})


def _softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def multilabel_bce(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Binary cross-entropy summed over classes (and averaged over rows for a batch).

    ``targets`` is a 0/1 array shaped like ``logits`` or, for a single image,
    an iterable of positive class ids.
    """
    z = np.asarray(logits)
    if z.ndim == 1 and not (isinstance(targets, np.ndarray) and targets.shape == z.shape):
        y = np.zeros_like(z)
        y[list(targets)] = 1
    else:
        y = np.asarray(targets, dtype=z.dtype)
    n = 1 if z.ndim == 1 else z.shape[0]
    value = float((_softplus(z) - y * z).sum()) / n
    return value, (_sigmoid(z) - y) / n


def context_hinge_loss(edit_logits: Mapping[int, np.ndarray]) -> tuple[float, dict[int, np.ndarray]]:
    """Hinge on the context ordering for one image's full edited set.

    ``edit_logits[c]`` holds the logits of the image with class ``c`` removed.
    For each removed class ``i`` the term is
    ``max(0, S_i(I - i) - min_{j != i} S_i(I - j))``. Gradients go to the
    attaining elements; ties in the min go to the smallest class id.
    """
    keys = sorted(edit_logits)
    grads = {k: np.zeros_like(np.asarray(edit_logits[k])) for k in keys}
    total = 0.0
    for i in keys:
        others = [j for j in keys if j != i]
        if not others:
            continue
        scores = [float(edit_logits[j][i]) for j in others]
        m = int(np.argmin(scores))
        term = float(edit_logits[i][i]) - scores[m]
        if term > 0:
            total += term
            grads[i][i] += 1.0
            grads[others[m]][i] -= 1.0
    return total, grads


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    return z - lse


SEG_MODES = ("plain", "ignore", "negative")


def seg_loss(logits: np.ndarray, labels: np.ndarray, mode: str = "ignore", removed_class: int | None = None,
             edit_mask: np.ndarray | None = None, lam_neg: float = 0.5) -> tuple[float, np.ndarray, dict[str, float]]:
    """Per-pixel softmax cross-entropy for one image (H x W x C logits).

    ``ignore`` drops IGNORE pixels from the mean; ``negative`` additionally
    adds ``lam_neg`` times the mean over ``edit_mask`` of ``-log(1 - p_removed)``.
    ``removed_class`` is an object class id (its label channel is ``id + 1``).
    """
    if mode not in SEG_MODES:
        raise ValueError(f"mode must be one of {SEG_MODES}")
    z = np.asarray(logits)
    labels = np.asarray(labels)
    h, w, c = z.shape
    logp = _log_softmax(z)
    p = np.exp(logp)
    grad = np.zeros_like(z)
    valid = labels != IGNORE
    if mode == "plain" and not valid.all():
        raise ValueError("plain mode does not accept ignore-labelled pixels")
    n_valid = int(valid.sum())
    ce = 0.0
    if n_valid:
        lab = np.where(valid, labels, 0).astype(np.intp)
        picked = np.take_along_axis(logp, lab[..., None], axis=-1)[..., 0]
        ce = float(-(picked * valid).sum()) / n_valid
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
        grad += (p - onehot) * (valid[..., None] / n_valid)
    neg = 0.0
    if mode == "negative":
        if removed_class is None or edit_mask is None:
            raise ValueError("negative mode needs removed_class and edit_mask")
        r = label_of(removed_class)
        em = np.asarray(edit_mask, dtype=bool)
        n_edit = int(em.sum())
        if n_edit:
            # -log(1 - p_r) = logsumexp(z) - logsumexp(z without r)
            rest = np.delete(z, r, axis=-1)
            m = rest.max(axis=-1, keepdims=True)
            lse_rest = m[..., 0] + np.log(np.exp(rest - m).sum(axis=-1))
            lse_all = (z - logp)[..., 0]
            term = lse_all - lse_rest
            neg = lam_neg * float((term * em).sum()) / n_edit
            q = np.exp(z - lse_rest[..., None])
            q[..., r] = 0.0
            grad += lam_neg * (p - q) * (em[..., None] / n_edit)
    return ce + neg, grad, {"seg_ce": ce, "seg_neg": neg}


def sgd_step(values: np.ndarray, grad: np.ndarray, velocity: np.ndarray | None, lr: float,
             momentum: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Heavy-ball update: ``v <- mu v + g``, ``theta <- theta - lr v``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if grad.shape != values.shape:
        raise ValueError("gradient and parameter lengths differ")
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergence("non-finite gradient")
    v = grad.copy() if velocity is None else momentum * velocity + grad
    return values - np.asarray(lr, dtype=values.dtype) * v.astype(values.dtype), v


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(params: ParameterVector, path: str | Path, extra: dict | None = None) -> None:
    header = {"arch": params.arch.to_dict(), "seed": params.seed, **(extra or {})}
    formats.write_bytes(path, formats.encode_weights(params.values, header))


def load_checkpoint(path: str | Path) -> tuple[ParameterVector, dict]:
    values, header = formats.decode_weights(Path(path).read_bytes(), path)
    arch = ArchDescriptor.from_dict(header["arch"])
    return ParameterVector(values=values, arch=arch, seed=header.get("seed", 0)), header
