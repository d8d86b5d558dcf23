"""Object removal edits: dilation, removability gate, backfill, flipped-mask controls."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .scenegen import IGNORE, ClassSpec, ObjectInstance, Scene, render_background

SIZE_GATE = 0.30
DEGENERATE_OVERLAP = 0.5


class RemovalError(ValueError):
    pass


@dataclass(frozen=True)
class BackfillPolicy:
    """How removed pixels are refilled.

    ``mask_only`` and ``constant`` paint a flat colour (for ``mask_only`` the
    dataset mean); ``oracle_background`` re-renders the scene's background
    texture; ``none`` leaves pixels untouched (label-only edits).
    """

    kind: str
    color: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("mask_only", "oracle_background", "constant", "none"):
            raise ValueError(f"unknown backfill policy {self.kind!r}")
        if self.kind in ("mask_only", "constant") and self.color is None:
            raise ValueError(f"backfill {self.kind!r} needs a colour")

    @classmethod
    def mask_only(cls, dataset_mean) -> "BackfillPolicy":
        return cls("mask_only", tuple(float(c) for c in dataset_mean))

    @classmethod
    def oracle_background(cls) -> "BackfillPolicy":
        return cls("oracle_background")

    @classmethod
    def constant(cls, color) -> "BackfillPolicy":
        return cls("constant", tuple(float(c) for c in color))

    def describe(self) -> str:
        return self.kind if self.color is None else f"{self.kind}({','.join(f'{c:.4f}' for c in self.color)})"


@dataclass
class EditRecord:
    base_scene_id: int
    removed_class: int
    dilated_mask: np.ndarray
    backfill: BackfillPolicy
    edited_image: np.ndarray
    edited_labels: np.ndarray
    is_control: bool = False
    control_overlap: float = 0.0

    @property
    def degenerate(self) -> bool:
        return self.is_control and self.control_overlap > DEGENERATE_OVERLAP


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1) x (2r+1) square."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool))


def is_removable(obj: ObjectInstance, class_spec: ClassSpec, size_gate: float = SIZE_GATE) -> bool:
    return obj.area_fraction < size_gate and not class_spec.is_stuff


def removable_classes(scene: Scene, classes: Sequence[ClassSpec], size_gate: float = SIZE_GATE) -> list[int]:
    """Classes present in the scene whose every instance passes the removal gate."""
    out = []
    for cid in scene.class_ids():
        if all(is_removable(o, classes[cid], size_gate) for o in scene.objects if o.class_id == cid):
            out.append(cid)
    return out


def _backfill(scene: Scene, mask: np.ndarray, policy: BackfillPolicy) -> np.ndarray:
    edited = scene.image.copy()
    if policy.kind == "none":
        return edited
    if policy.kind == "oracle_background":
        h, w = scene.shape
        edited[mask] = render_background(scene.seed, h, w, scene.noise_amplitude)[mask]
    else:
        edited[mask] = np.asarray(policy.color, dtype=edited.dtype)
    return edited


def _checked_mask(scene, class_id, classes, size_gate):
    if class_id not in scene.class_ids():
        raise RemovalError(f"class {class_id} is not present in scene {scene.scene_id}")
    if class_id not in removable_classes(scene, classes, size_gate):
        raise RemovalError(f"class {class_id} is not removable in scene {scene.scene_id}")
    return scene.class_mask(class_id)


def remove_object(scene: Scene, class_id: int, classes: Sequence[ClassSpec], radius: int = 2,
                  policy: BackfillPolicy | None = None, size_gate: float = SIZE_GATE) -> EditRecord:
    """Remove every instance of ``class_id`` and backfill the dilated union mask."""
    policy = policy or BackfillPolicy.oracle_background()
    dil = dilate_mask(_checked_mask(scene, class_id, classes, size_gate), radius)
    labels = scene.labels.copy()
    labels[dil] = IGNORE
    return EditRecord(base_scene_id=scene.scene_id, removed_class=class_id, dilated_mask=dil, backfill=policy,
                      edited_image=_backfill(scene, dil, policy), edited_labels=labels)


def ignore_object_labels(scene: Scene, class_id: int, classes: Sequence[ClassSpec], radius: int = 2,
                         size_gate: float = SIZE_GATE) -> EditRecord:
    """Label-only edit: the object's dilated region is ignored but its pixels stay."""
    dil = dilate_mask(_checked_mask(scene, class_id, classes, size_gate), radius)
    labels = scene.labels.copy()
    labels[dil] = IGNORE
    return EditRecord(base_scene_id=scene.scene_id, removed_class=class_id, dilated_mask=dil,
                      backfill=BackfillPolicy("none"), edited_image=scene.image.copy(), edited_labels=labels)


def false_edit(scene: Scene, class_id: int, classes: Sequence[ClassSpec], radius: int = 2,
               policy: BackfillPolicy | None = None, size_gate: float = SIZE_GATE) -> EditRecord:
    """Control edit: backfill the horizontally mirrored mask, leaving the object in place."""
    policy = policy or BackfillPolicy.oracle_background()
    dil = dilate_mask(_checked_mask(scene, class_id, classes, size_gate), radius)
    flipped = dil[:, ::-1].copy()
    overlap = float((flipped & dil).sum()) / float(dil.sum())
    labels = scene.labels.copy()
    labels[flipped] = IGNORE
    return EditRecord(base_scene_id=scene.scene_id, removed_class=class_id, dilated_mask=flipped, backfill=policy,
                      edited_image=_backfill(scene, flipped, policy), edited_labels=labels,
                      is_control=True, control_overlap=overlap)


def build_edited_set(scene: Scene, classes: Sequence[ClassSpec], radius: int = 2,
                     policy: BackfillPolicy | None = None, size_gate: float = SIZE_GATE,
                     control: bool = False) -> list[EditRecord]:
    """One edit per removable class present, ascending class id (controls if ``control``)."""
    make = false_edit if control else remove_object
    return [make(scene, cid, classes, radius, policy, size_gate) for cid in removable_classes(scene, classes, size_gate)]
