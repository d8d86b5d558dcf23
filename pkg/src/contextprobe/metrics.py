"""Robustness and performance metrics.

Scores are raw logits. Class indices are object class ids; rasters hold
labels (``class_id + 1``, background 0, ``IGNORE``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .scenegen import IGNORE, Scene, label_of


@dataclass
class SceneScores:
    original: np.ndarray
    edits: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class ScoreTable:
    entries: dict[int, SceneScores] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def add(self, scene_id: int, original: np.ndarray, edits: Mapping[int, np.ndarray]) -> None:
        self.entries[scene_id] = SceneScores(np.asarray(original), {int(k): np.asarray(v) for k, v in edits.items()})


@dataclass(frozen=True)
class ConstraintCheck:
    eligible: bool
    violated_min: bool = False
    violated_mean: bool = False

    @property
    def satisfied(self) -> bool:
        return self.eligible and not (self.violated_min or self.violated_mean)


def check_constraint(score_without: float, owc_scores: Sequence[float]) -> ConstraintCheck:
    """Compare S(I - c_i) with the object-without-context scores S(I - c_j).

    Equality is not a violation. An empty owc set is ineligible.
    """
    owc = np.asarray(owc_scores, dtype=float)
    if owc.size == 0:
        return ConstraintCheck(eligible=False)
    return ConstraintCheck(True, bool(owc.min() < score_without), bool(owc.mean() < score_without))


@dataclass(frozen=True)
class VStats:
    vmin: float
    vmean: float
    eligible_n: int
    violations_min: int
    violations_mean: int


def v_metrics(table: ScoreTable) -> dict[int, VStats]:
    """Per-class violation fractions over eligible images.

    Eligible: the class is removable in the image and at least one other
    class was removed too. Classes that are never eligible are absent.
    """
    if not table.entries:
        raise ValueError("score table is empty")
    counts: dict[int, list[int]] = {}
    for sid in sorted(table.entries):
        edits = table.entries[sid].edits
        for i in sorted(edits):
            owc = [float(edits[j][i]) for j in sorted(edits) if j != i]
            chk = check_constraint(float(edits[i][i]), owc)
            if not chk.eligible:
                continue
            c = counts.setdefault(i, [0, 0, 0])
            c[0] += 1
            c[1] += chk.violated_min
            c[2] += chk.violated_mean
    return {i: VStats(vmin=vm / n, vmean=ve / n, eligible_n=n, violations_min=vm, violations_mean=ve)
            for i, (n, vm, ve) in sorted(counts.items())}


def mean_v(stats: Mapping[int, VStats]) -> tuple[float, float]:
    if not stats:
        return float("nan"), float("nan")
    return (float(np.mean([s.vmin for s in stats.values()])),
            float(np.mean([s.vmean for s in stats.values()])))


def iou(pred_labels: np.ndarray, gt_labels: np.ndarray, label: int, exclude: np.ndarray | None = None) -> float:
    """IoU of one label value; IGNORE pixels in ``gt`` and ``exclude`` pixels are dropped.

    Both sets empty gives 1.0.
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"shape mismatch {pred_labels.shape} vs {gt_labels.shape}")
    keep = (gt_labels != IGNORE) & (pred_labels != IGNORE)
    if exclude is not None:
        keep &= ~np.asarray(exclude, dtype=bool)
    p = (pred_labels == label) & keep
    g = (gt_labels == label) & keep
    union = int((p | g).sum())
    return 1.0 if union == 0 else int((p & g).sum()) / union


@dataclass
class EditPrediction:
    removed_class: int
    mask: np.ndarray
    pred: np.ndarray


@dataclass
class ARResult:
    alpha: float
    ar: np.ndarray  # K x K, nan where no image holds both classes
    affected: np.ndarray
    pairs: np.ndarray
    mean_delta: np.ndarray
    deltas: dict[tuple[int, int], list[float]]


def delta_iou(gt: np.ndarray, pred_orig: np.ndarray, pred_edit: np.ndarray, class_id: int, mask: np.ndarray) -> float:
    lab = label_of(class_id)
    return iou(pred_edit, gt, lab, exclude=mask) - iou(pred_orig, gt, lab, exclude=mask)


def ar_matrix(gts: Sequence[np.ndarray], orig_preds: Sequence[np.ndarray],
              edit_preds: Sequence[Sequence[EditPrediction]], present: Sequence[Iterable[int]],
              n_classes: int, alpha: float = 0.10) -> ARResult:
    """Fraction of images where removing c_j moves c_i's IoU by at least ``alpha``.

    ``present[k]`` lists the object classes in scene ``k``; ``edit_preds[k]``
    holds one prediction per edit of that scene. Edited pixels are excluded
    from both IoU evaluations.
    """
    k = n_classes
    affected = np.zeros((k, k), dtype=int)
    pairs = np.zeros((k, k), dtype=int)
    deltas: dict[tuple[int, int], list[float]] = {}
    for gt, po, edits, pres in zip(gts, orig_preds, edit_preds, present):
        pres = sorted(set(pres))
        for e in edits:
            j = e.removed_class
            for i in pres:
                if i == j:
                    continue
                d = delta_iou(gt, po, e.pred, i, e.mask)
                pairs[i, j] += 1
                affected[i, j] += abs(d) >= alpha
                deltas.setdefault((i, j), []).append(d)
    with np.errstate(invalid="ignore", divide="ignore"):
        ar = np.where(pairs > 0, affected / np.maximum(pairs, 1), np.nan)
    mean_delta = np.full((k, k), np.nan)
    for (i, j), ds in deltas.items():
        mean_delta[i, j] = float(np.mean(ds))
    return ARResult(alpha=alpha, ar=ar, affected=affected, pairs=pairs, mean_delta=mean_delta, deltas=deltas)


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mean precision at each positive, ranking by descending score (stable on ties).

    ``None`` when there are no positives.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if not y.any():
        return None
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(scores: np.ndarray, targets: np.ndarray) -> tuple[float, dict[int, float]]:
    """Unweighted mean of per-class AP over classes with at least one positive."""
    per_class = {}
    for c in range(scores.shape[1]):
        ap = average_precision(scores[:, c], targets[:, c])
        if ap is not None:
            per_class[c] = ap
    m = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return m, per_class


def seg_perf(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> dict:
    """Dataset-level mIoU (over label values present in the ground truth) and pixel accuracy."""
    inter: dict[int, int] = {}
    union: dict[int, int] = {}
    correct = total = 0
    seen: set[int] = set()
    for p, g in zip(preds, gts):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        keep = g != IGNORE
        correct += int(((p == g) & keep).sum())
        total += int(keep.sum())
        labels_here = set(np.unique(g[keep]).tolist())
        seen |= labels_here
        for lab in labels_here | set(np.unique(p[keep]).tolist()):
            pm = (p == lab) & keep
            gm = (g == lab) & keep
            inter[lab] = inter.get(lab, 0) + int((pm & gm).sum())
            union[lab] = union.get(lab, 0) + int((pm | gm).sum())
    per_class = {lab: inter[lab] / union[lab] for lab in sorted(seen)}
    return {
        "miou": float(np.mean(list(per_class.values()))) if per_class else float("nan"),
        "pixel_accuracy": correct / total if total else float("nan"),
        "per_label_iou": per_class,
    }


def presence_sets(scenes: Iterable[Scene]) -> list[set[int]]:
    return [set(s.class_ids()) for s in scenes]


def nc_matrix(presence: Iterable[Iterable[int]], n_classes: int) -> np.ndarray:
    """NC[i, j] = count(i and j) / count(i); rows of absent classes are nan."""
    sets = [set(p.class_ids()) if isinstance(p, Scene) else set(p) for p in presence]
    if not sets:
        raise ValueError("dataset is empty")
    x = np.zeros((len(sets), n_classes))
    for r, s in enumerate(sets):
        x[r, sorted(s)] = 1
    joint = x.T @ x
    counts = np.diag(joint).copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts[:, None] > 0, joint / np.maximum(counts[:, None], 1), np.nan)


# -- report -------------------------------------------------------------------------

def _clean(x):
    """nan -> None, numpy scalars/arrays -> plain Python, recursively."""
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (np.floating, float)):
        return None if np.isnan(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def to_array(matrix) -> np.ndarray:
    return np.array([[np.nan if v is None else v for v in row] for row in matrix], dtype=float)


@dataclass
class RobustnessReport:
    task: str
    n_classes: int
    alpha: float
    radius: int
    backfill: str
    config_hash: str = ""
    provenance: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    ar: list | None = None
    ar_counts: list | None = None
    mean_delta_iou: list | None = None
    control_ar: list | None = None
    control_counts: list | None = None
    nc: list | None = None

    def __post_init__(self):
        for name in ("per_class", "summary", "provenance", "ar", "ar_counts", "mean_delta_iou",
                     "control_ar", "control_counts", "nc"):
            setattr(self, name, _clean(getattr(self, name)))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RobustnessReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RobustnessReport":
        return cls.from_dict(json.loads(text))
