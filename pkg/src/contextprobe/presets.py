"""Built-in biased scene specifications.

``biased_classification``: a faint object ("keyboard") that nearly always sits
next to a salient one ("monitor"), plus two unrelated distractors.

``biased_segmentation``: two look-alike stuff regions ("road", "sidewalk"),
each usually accompanied by its own small context object ("car", "tree").
"""

from __future__ import annotations

from .scenegen import ClassSpec, CoocSpec, SceneSpec


def biased_classification(height: int = 32, width: int = 32, p_pair: float = 0.97) -> SceneSpec:
    classes = (
        ClassSpec(0, "square", (0.15, 0.2, 0.75), (0.25, 0.32), name="monitor"),
        ClassSpec(1, "triangle", (0.64, 0.555, 0.435), (0.16, 0.22), name="keyboard"),
        ClassSpec(2, "disc", (0.85, 0.2, 0.2), (0.2, 0.28), name="cup"),
        ClassSpec(3, "triangle", (0.2, 0.75, 0.25), (0.22, 0.3), name="plant"),
    )
    p_cond = [[0.0] * 4 for _ in range(4)]
    p_cond[0][1] = p_pair
    cooc = CoocSpec(p_anchor=(0.5, 0.04, 0.35, 0.35), p_cond=tuple(map(tuple, p_cond)), max_objects=6)
    return SceneSpec(classes=classes, cooc=cooc, height=height, width=width)


def biased_segmentation(height: int = 32, width: int = 32, p_pair: float = 0.95) -> SceneSpec:
    classes = (
        ClassSpec(0, "disc", (0.85, 0.15, 0.15), (0.16, 0.22), name="car"),
        ClassSpec(1, "square", (0.40, 0.40, 0.46), (0.4, 0.48), is_stuff=True, name="road"),
        ClassSpec(2, "square", (0.46, 0.43, 0.38), (0.4, 0.48), is_stuff=True, name="sidewalk"),
        ClassSpec(3, "triangle", (0.15, 0.65, 0.2), (0.18, 0.25), name="tree"),
    )
    p_cond = [[0.0] * 4 for _ in range(4)]
    p_cond[1][0] = p_pair
    p_cond[2][3] = p_pair
    cooc = CoocSpec(p_anchor=(0.08, 0.5, 0.5, 0.08), p_cond=tuple(map(tuple, p_cond)), max_objects=6)
    # low jitter keeps the two stuff colours separable per pixel, so context is a shortcut, not a necessity
    return SceneSpec(classes=classes, cooc=cooc, height=height, width=width, color_jitter=0.04)


PRESETS = {
    "biased_classification": biased_classification,
    "biased_segmentation": biased_segmentation,
}


def get_preset(name: str, height: int, width: int) -> SceneSpec:
    try:
        return PRESETS[name](height, width)
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
