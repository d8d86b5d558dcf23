"""Removal samplers and augmented training examples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .removal import SIZE_GATE, BackfillPolicy, EditRecord, ignore_object_labels, remove_object, removable_classes
from .scenegen import ClassSpec, Scene

SAMPLERS = ("random", "sizebased", "hardneg")
TASK_MODES = ("classify", "seg-ignore", "seg-negative", "no-removal-ignore")


@dataclass
class ClassLossTracker:
    """Running average of per-class segmentation loss."""

    values: np.ndarray
    decay: float = 0.9
    floor: float = 1e-3

    @classmethod
    def create(cls, n_classes: int, initial: float | None = None, decay: float = 0.9,
               floor: float = 1e-3) -> "ClassLossTracker":
        # ln(n) is the loss of a uniform prediction over n labels
        init = math.log(n_classes + 1) if initial is None else initial
        return cls(values=np.full(n_classes, max(init, floor)), decay=decay, floor=floor)

    def copy(self) -> "ClassLossTracker":
        return ClassLossTracker(self.values.copy(), self.decay, self.floor)


def update_tracker(tracker: ClassLossTracker, class_id: int, observed_loss: float) -> ClassLossTracker:
    if not math.isfinite(observed_loss):
        raise ValueError(f"non-finite loss {observed_loss!r} for class {class_id}")
    if observed_loss < 0:
        raise ValueError("observed loss must be >= 0")
    out = tracker.copy()
    v = tracker.decay * tracker.values[class_id] + (1.0 - tracker.decay) * observed_loss
    out.values[class_id] = max(v, tracker.floor)
    return out


def random_probs(scene: Scene, classes: Sequence[ClassSpec], size_gate: float = SIZE_GATE) -> dict[int, float]:
    cands = removable_classes(scene, classes, size_gate)
    return {c: 1.0 / len(cands) for c in cands}


def sizebased_probs(scene: Scene, classes: Sequence[ClassSpec], size_gate: float = SIZE_GATE) -> dict[int, float]:
    """p(c) proportional to (total removable area) / area(c): small objects are favoured."""
    areas = {c: scene.class_area(c) for c in removable_classes(scene, classes, size_gate)}
    areas = {c: a for c, a in areas.items() if a > 0}
    if not areas:
        return {}
    total = sum(areas.values())
    w = {c: total / a for c, a in areas.items()}
    z = sum(w.values())
    return {c: x / z for c, x in w.items()}


def hardneg_probs(scene: Scene, classes: Sequence[ClassSpec], tracker: ClassLossTracker,
                  size_gate: float = SIZE_GATE) -> dict[int, float]:
    """p(c) proportional to 1 / l_avg(c) over removable classes in this scene."""
    cands = removable_classes(scene, classes, size_gate)
    if not cands:
        return {}
    w = {c: 1.0 / max(float(tracker.values[c]), tracker.floor) for c in cands}
    z = sum(w.values())
    return {c: x / z for c, x in w.items()}


def _draw(probs: dict[int, float], rng: np.random.Generator) -> int | None:
    if not probs:
        return None
    keys = sorted(probs)
    p = np.array([probs[k] for k in keys])
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def pick_random(scene, classes, rng, size_gate=SIZE_GATE) -> int | None:
    """Uniform over removable classes; ``None`` means skip augmentation."""
    return _draw(random_probs(scene, classes, size_gate), rng)


def pick_sizebased(scene, classes, rng, size_gate=SIZE_GATE) -> int | None:
    return _draw(sizebased_probs(scene, classes, size_gate), rng)


def pick_hardneg(scene, classes, tracker, rng, size_gate=SIZE_GATE) -> int | None:
    return _draw(hardneg_probs(scene, classes, tracker, size_gate), rng)


def pick(sampler: str, scene, classes, rng, tracker=None, size_gate=SIZE_GATE) -> int | None:
    if sampler == "random":
        return pick_random(scene, classes, rng, size_gate)
    if sampler == "sizebased":
        return pick_sizebased(scene, classes, rng, size_gate)
    if sampler == "hardneg":
        if tracker is None:
            raise ValueError("hardneg sampler needs a ClassLossTracker")
        return pick_hardneg(scene, classes, tracker, rng, size_gate)
    raise ValueError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")


@dataclass
class AugmentedExample:
    record: EditRecord
    task_mode: str
    sampler: str
    label_set: frozenset[int] = field(default_factory=frozenset)

    @property
    def image(self) -> np.ndarray:
        return self.record.edited_image

    @property
    def labels(self) -> np.ndarray:
        return self.record.edited_labels

    @property
    def removed_class(self) -> int:
        return self.record.removed_class


def make_augmented_example(scene: Scene, classes: Sequence[ClassSpec], sampler: str, task_mode: str,
                           rng: np.random.Generator, *, radius: int = 2, policy: BackfillPolicy | None = None,
                           tracker: ClassLossTracker | None = None,
                           size_gate: float = SIZE_GATE) -> AugmentedExample | None:
    """Pick one class with ``sampler`` and build the edited training example.

    Returns ``None`` when the scene has nothing removable.
    """
    if task_mode not in TASK_MODES:
        raise ValueError(f"unknown task mode {task_mode!r}")
    cid = pick(sampler, scene, classes, rng, tracker, size_gate)
    if cid is None:
        return None
    if task_mode == "no-removal-ignore":
        rec = ignore_object_labels(scene, cid, classes, radius, size_gate)
    else:
        rec = remove_object(scene, cid, classes, radius, policy, size_gate)
    label_set = frozenset(c for c in scene.class_ids() if c != cid)
    return AugmentedExample(record=rec, task_mode=task_mode, sampler=sampler, label_set=label_set)
