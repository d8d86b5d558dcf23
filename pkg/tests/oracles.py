"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import mpmath
import numpy as np

from contextprobe import tinymodel

IGNORE = 0xFFFF


def brute_dilate(mask: np.ndarray, r: int) -> np.ndarray:
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            hit = False
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and mask[yy, xx]:
                        hit = True
            out[y, x] = hit
    return out


def activation_pattern(params, images):
    """ReLU signs and max-pool winners; finite differences are valid only where these stay fixed."""
    _, cache = tinymodel.apply(params, images)
    signs = [z > 0 for z in cache.pre]
    return signs, None if cache.argmax is None else cache.argmax.copy()


def same_pattern(a, b) -> bool:
    if a[1] is None:
        return all((x == y).all() for x, y in zip(a[0], b[0]))
    return all((x == y).all() for x, y in zip(a[0], b[0])) and (a[1] == b[1]).all()


def central_difference(f, x: np.ndarray, eps: float = 1e-3, on_eval=None) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
        if on_eval is not None:
            on_eval(xp)
            on_eval(xm)
    return g


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def brute_v(table_rows):
    """table_rows: {scene: {removed_class: logits}} -> {class: (eligible, vmin_count, vmean_count)}."""
    out = {}
    for scene, edits in table_rows.items():
        classes = list(edits.keys())
        for ci in classes:
            without = edits[ci][ci]
            owc = []
            for cj in classes:
                if cj != ci:
                    owc.append(edits[cj][ci])
            if len(owc) == 0:
                continue
            smallest = owc[0]
            total = 0.0
            for v in owc:
                if v < smallest:
                    smallest = v
                total += v
            e, a, b = out.get(ci, (0, 0, 0))
            out[ci] = (e + 1, a + (1 if smallest < without else 0), b + (1 if total / len(owc) < without else 0))
    return out


def brute_iou(pred, gt, label, exclude):
    inter = union = 0
    h, w = gt.shape
    for y in range(h):
        for x in range(w):
            if exclude[y, x] or gt[y, x] == IGNORE:
                continue
            p = pred[y, x] == label
            g = gt[y, x] == label
            inter += p and g
            union += p or g
    return 1.0 if union == 0 else inter / union


def brute_ar(scenes, alpha, k):
    """scenes: list of (gt, pred_orig, present, [(removed, mask, pred_edit)]) -> (affected, pairs) counts."""
    affected = np.zeros((k, k), dtype=int)
    pairs = np.zeros((k, k), dtype=int)
    for gt, po, present, edits in scenes:
        for removed, mask, pe in edits:
            for ci in present:
                if ci == removed:
                    continue
                before = brute_iou(po, gt, ci + 1, mask)
                after = brute_iou(pe, gt, ci + 1, mask)
                pairs[ci, removed] += 1
                if abs(after - before) >= alpha:
                    affected[ci, removed] += 1
    return affected, pairs


def brute_ap(scores, labels):
    """Precision at each positive, walking the list in (score desc, index asc) order."""
    idx = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = 0
    precisions = []
    for rank, i in enumerate(idx, start=1):
        if labels[i]:
            tp += 1
            precisions.append(tp / rank)
    return sum(precisions) / len(precisions)


def mp_bce(logits, targets, dps=50):
    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for z, y in zip(logits, targets):
            z = mpmath.mpf(float(z))
            p = 1 / (1 + mpmath.exp(-z))
            total += -(y * mpmath.log(p) + (1 - y) * mpmath.log(1 - p))
        return float(total)


def mp_softmax_ce(logits, labels, dps=50):
    """Mean cross-entropy over pixels whose label is not IGNORE."""
    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        n = 0
        h, w, _ = logits.shape
        for y in range(h):
            for x in range(w):
                lab = int(labels[y, x])
                if lab == IGNORE:
                    continue
                zs = [mpmath.mpf(float(v)) for v in logits[y, x]]
                lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in zs))
                total += lse - zs[lab]
                n += 1
        return float(total / n) if n else 0.0
