"""Synthetic multi-object scenes with controlled class co-occurrence.

Object classes are numbered ``0..K-1``. In label rasters background is 0 and
class ``c`` is stored as ``c + 1`` (see :func:`label_of`); ``IGNORE`` marks
pixels excluded from losses and metrics.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import formats

IGNORE = 0xFFFF
BACKGROUND = 0
SHAPES = ("disc", "square", "triangle")
MAX_PLACEMENT_TRIES = 64


class GenerationError(RuntimeError):
    pass


def label_of(class_id: int) -> int:
    return class_id + 1


def class_of(label: int) -> int:
    return label - 1


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape: str
    base_color: tuple[float, float, float]
    size_range: tuple[float, float]
    is_stuff: bool = False
    name: str = ""
    instances: tuple[int, int] = (1, 1)

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"class {self.class_id}: unknown shape {self.shape!r}")
        if len(self.base_color) != 3 or not all(0.0 <= c <= 1.0 for c in self.base_color):
            raise ValueError(f"class {self.class_id}: base_color must be 3 values in [0, 1]")
        lo, hi = self.size_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"class {self.class_id}: size_range must lie within (0, 1)")
        if not (1 <= self.instances[0] <= self.instances[1]):
            raise ValueError(f"class {self.class_id}: instances must be 1 <= lo <= hi")


@dataclass(frozen=True)
class CoocSpec:
    p_anchor: tuple[float, ...]
    p_cond: tuple[tuple[float, ...], ...]
    max_objects: int = 8

    @property
    def K(self) -> int:
        return len(self.p_anchor)

    def validate(self) -> None:
        k = self.K
        if len(self.p_cond) != k or any(len(row) != k for row in self.p_cond):
            raise ValueError(f"p_cond must be {k} x {k}")
        probs = list(self.p_anchor) + [p for row in self.p_cond for p in row]
        if not all(0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.max_objects < 1:
            raise ValueError("max_objects must be >= 1")


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render a scene: classes, co-occurrence, canvas and texture."""

    classes: tuple[ClassSpec, ...]
    cooc: CoocSpec
    height: int = 64
    width: int = 64
    noise_amplitude: float = 0.06
    color_jitter: float = 0.1
    min_gap: int = 2

    @property
    def K(self) -> int:
        return len(self.classes)

    def validate(self) -> None:
        ids = [c.class_id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValueError("class_ids must be unique, dense and ordered 0..K-1")
        if self.cooc.K != len(ids):
            raise ValueError(f"co-occurrence spec has {self.cooc.K} classes, class list has {len(ids)}")
        for c in self.classes:
            c.validate()
        self.cooc.validate()
        if self.height < 32 or self.width < 32:
            raise ValueError("canvas must be at least 32 x 32")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        classes = tuple(
            ClassSpec(
                **{
                    **c,
                    "base_color": tuple(c["base_color"]),
                    "size_range": tuple(c["size_range"]),
                    "instances": tuple(c.get("instances", (1, 1))),
                }
            )
            for c in d.pop("classes")
        )
        co = d.pop("cooc")
        cooc = CoocSpec(
            p_anchor=tuple(co["p_anchor"]),
            p_cond=tuple(tuple(r) for r in co["p_cond"]),
            max_objects=co.get("max_objects", 8),
        )
        return cls(classes=classes, cooc=cooc, **d)


@dataclass
class ObjectInstance:
    class_id: int
    mask: np.ndarray
    bbox: tuple[int, int, int, int]  # (row0, col0, row1, col1), half-open

    @property
    def area_fraction(self) -> float:
        return float(self.mask.sum()) / self.mask.size


@dataclass
class Scene:
    scene_id: int
    image: np.ndarray  # H x W x 3 float32
    labels: np.ndarray  # H x W uint16
    objects: list[ObjectInstance]
    seed: int
    noise_amplitude: float = 0.06

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def class_ids(self) -> list[int]:
        return sorted({o.class_id for o in self.objects})

    def class_mask(self, class_id: int) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for o in self.objects:
            if o.class_id == class_id:
                m |= o.mask
        return m

    def class_area(self, class_id: int) -> float:
        return float(self.class_mask(class_id).sum()) / self.labels.size


@dataclass
class Dataset:
    spec: SceneSpec
    seed: int
    scenes: list[Scene]
    mean_color: tuple[float, float, float] = field(default=(0.5, 0.5, 0.5))

    def __len__(self) -> int:
        return len(self.scenes)


def scene_seed(seed: int, index: int) -> int:
    """Derived per-scene seed; a pure function of (dataset seed, index)."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


def render_background(seed: int, height: int, width: int, amplitude: float) -> np.ndarray:
    """Low-amplitude textured noise: a smooth coarse field plus fine grain."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    coarse = rng.uniform(-1.0, 1.0, size=(height // 8 + 1, width // 8 + 1, 3))
    smooth = ndimage.zoom(coarse, (8, 8, 1), order=1)[:height, :width]
    fine = rng.uniform(-1.0, 1.0, size=(height, width, 3))
    bg = 0.5 + amplitude * (0.7 * smooth + 0.3 * fine)
    return np.clip(bg, 0.0, 1.0).astype(np.float32)


def shape_mask(shape: str, side: int) -> np.ndarray:
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    if shape == "disc":
        r = side / 2.0
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    if shape == "triangle":
        # apex at top centre, base along the bottom row
        half = (yy / side) * (side / 2.0)
        return np.abs(xx - side / 2.0) <= half + 0.5
    raise ValueError(f"unknown shape {shape!r}")


def draw_presence(cooc: CoocSpec, rng: np.random.Generator, max_redraws: int = 10_000) -> list[int]:
    """Anchors from ``p_anchor``, then one round of additions from ``p_cond``.

    Additions are triggered only by anchor classes (no cascading). Empty draws
    are rejected so every scene holds at least one object.
    """
    k = cooc.K
    p_anchor = np.asarray(cooc.p_anchor, dtype=float)
    p_cond = np.asarray(cooc.p_cond, dtype=float)
    for _ in range(max_redraws):
        anchors = rng.random(k) < p_anchor
        u = rng.random((k, k))
        triggered = (u < p_cond) & anchors[:, None]
        np.fill_diagonal(triggered, False)
        present = anchors | triggered.any(axis=0)
        if present.any():
            return [int(c) for c in np.flatnonzero(present)]
    raise GenerationError("co-occurrence spec never produces an object")


def expected_presence(cooc: CoocSpec) -> tuple[np.ndarray, np.ndarray]:
    """Exact P(i present) and P(i and j present) by enumerating anchor sets.

    Conditioned on the scene being nonempty, matching :func:`draw_presence`.
    """
    k = cooc.K
    pa = np.asarray(cooc.p_anchor, dtype=float)
    pc = np.asarray(cooc.p_cond, dtype=float).copy()
    np.fill_diagonal(pc, 0.0)
    single = np.zeros(k)
    joint = np.zeros((k, k))
    p_nonempty = 0.0
    for bits in itertools.product((False, True), repeat=k):
        a = np.array(bits)
        w = float(np.prod(np.where(a, pa, 1.0 - pa)))
        if w == 0.0:
            continue
        # classes are independently present given the anchor set
        q = np.where(a, 1.0, 1.0 - np.prod(np.where(a[:, None], 1.0 - pc, 1.0), axis=0))
        p_nonempty += w * (1.0 - np.prod(1.0 - q))
        single += w * q
        pair = np.outer(q, q)
        np.fill_diagonal(pair, q)
        joint += w * pair
    if p_nonempty == 0.0:
        raise GenerationError("co-occurrence spec never produces an object")
    # the empty scene contributes nothing to single/joint, so conditioning is a rescale
    return single / p_nonempty, joint / p_nonempty


def expected_nc(cooc: CoocSpec) -> np.ndarray:
    single, joint = expected_presence(cooc)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(single[:, None] > 0, joint / single[:, None], np.nan)


def _place(shape_m: np.ndarray, occupied: np.ndarray, gap: int, rng) -> tuple[int, int] | None:
    h, w = occupied.shape
    sh, sw = shape_m.shape
    if sh > h or sw > w:
        return None
    blocked = ndimage.binary_dilation(occupied, structure=np.ones((2 * gap + 1,) * 2)) if gap > 0 else occupied
    for _ in range(MAX_PLACEMENT_TRIES):
        r = int(rng.integers(0, h - sh + 1))
        c = int(rng.integers(0, w - sw + 1))
        if not (blocked[r : r + sh, c : c + sw] & shape_m).any():
            return r, c
    return None


def sample_scene(spec: SceneSpec, seed: int, scene_id: int = 0) -> Scene:
    """Render one scene; bit-identical for the same ``(spec, seed)``."""
    h, w = spec.height, spec.width
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    present = draw_presence(spec.cooc, rng)

    wanted: list[int] = []
    for cid in present:
        lo, hi = spec.classes[cid].instances
        wanted.extend([cid] * int(rng.integers(lo, hi + 1)))
    if len(wanted) > spec.cooc.max_objects:
        keep = np.sort(rng.permutation(len(wanted))[: spec.cooc.max_objects])
        wanted = [wanted[i] for i in keep]

    image = render_background(seed, h, w, spec.noise_amplitude)
    labels = np.zeros((h, w), dtype=np.uint16)
    occupied = np.zeros((h, w), dtype=bool)
    drawn = []
    for cid in wanted:
        cs = spec.classes[cid]
        side = max(3, int(round(rng.uniform(*cs.size_range) * min(h, w))))
        jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
        drawn.append((cid, side, np.clip(np.asarray(cs.base_color) + jitter, 0.0, 1.0)))
    # largest first so big stuff regions are not crowded out
    drawn.sort(key=lambda t: -t[1])

    objects: list[ObjectInstance] = []
    for cid, side, color in drawn:
        m = shape_mask(spec.classes[cid].shape, side)
        pos = _place(m, occupied, spec.min_gap, rng)
        if pos is None:
            continue
        r, c = pos
        full = np.zeros((h, w), dtype=bool)
        full[r : r + side, c : c + side] = m
        occupied |= full
        image[full] = color.astype(np.float32)
        labels[full] = label_of(cid)
        rows, cols = np.nonzero(full)
        bbox = (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
        objects.append(ObjectInstance(class_id=cid, mask=full, bbox=bbox))
    if not objects:
        raise GenerationError(f"could not place any object on a {h}x{w} canvas (seed {seed})")
    return Scene(scene_id=scene_id, image=image, labels=labels, objects=objects, seed=seed,
                 noise_amplitude=spec.noise_amplitude)


def generate_dataset(spec: SceneSpec, n_scenes: int, seed: int) -> Dataset:
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    spec.validate()
    scenes = [sample_scene(spec, scene_seed(seed, i), scene_id=i) for i in range(n_scenes)]
    mean = np.mean([s.image.reshape(-1, 3).mean(axis=0, dtype=np.float64) for s in scenes], axis=0)
    return Dataset(spec=spec, seed=seed, scenes=scenes, mean_color=tuple(float(x) for x in mean))


def split_dataset(scenes: Dataset | list[Scene]) -> dict[str, list[Scene]]:
    """Partition into ``cooccur`` (>= 2 instances) and ``single`` (exactly 1)."""
    scenes = list(scenes.scenes if isinstance(scenes, Dataset) else scenes)
    if not scenes:
        raise ValueError("dataset is empty")
    cooccur = [s for s in scenes if len(s.objects) >= 2]
    single = [s for s in scenes if len(s.objects) == 1]
    return {"full": scenes, "cooccur": cooccur, "single": single}


# -- persistence ---------------------------------------------------------------

def _scene_stem(i: int) -> str:
    return f"scene_{i:05d}"


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    index = []
    for s in ds.scenes:
        stem = _scene_stem(s.scene_id)
        formats.write_bytes(out / "scenes" / f"{stem}.cpr", formats.encode_image(s.image))
        formats.write_bytes(out / "scenes" / f"{stem}.cpl", formats.encode_labels(s.labels))
        objs = []
        for k, o in enumerate(s.objects):
            mname = f"{stem}_obj{k}.cpm"
            formats.write_bytes(out / "scenes" / mname, formats.encode_mask(o.mask))
            objs.append({"class_id": o.class_id, "bbox": list(o.bbox),
                         "area_fraction": o.area_fraction, "mask": f"scenes/{mname}"})
        index.append({"scene_id": s.scene_id, "seed": s.seed, "image": f"scenes/{stem}.cpr",
                      "labels": f"scenes/{stem}.cpl", "objects": objs})
    manifest = {"format": "contextprobe-dataset/1", "seed": ds.seed, "n_scenes": len(ds.scenes),
                "mean_color": list(ds.mean_color), "spec": ds.spec.to_dict(), "scenes": index}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    spec = SceneSpec.from_dict(manifest["spec"])
    scenes = []
    for entry in manifest["scenes"]:
        objects = [
            ObjectInstance(class_id=o["class_id"], mask=formats.read_mask(root / o["mask"]), bbox=tuple(o["bbox"]))
            for o in entry["objects"]
        ]
        scenes.append(Scene(scene_id=entry["scene_id"], image=formats.read_image(root / entry["image"]),
                            labels=formats.read_labels(root / entry["labels"]), objects=objects,
                            seed=entry["seed"], noise_amplitude=spec.noise_amplitude))
    return Dataset(spec=spec, seed=manifest["seed"], scenes=scenes, mean_color=tuple(manifest["mean_color"]))
