"""Experiment configuration: strict JSON parsing, validation and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

MODES = ("baseline", "aug-rand", "aug-const", "seg-ignore", "seg-neg", "no-removal-ignore")
CLASSIFIER_MODES = ("baseline", "aug-rand", "aug-const")
SEGMENTER_MODES = ("baseline", "seg-ignore", "seg-neg", "no-removal-ignore")
SAMPLERS = ("random", "sizebased", "hardneg")
BACKFILLS = ("oracle_background", "mask_only", "constant")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


@dataclass(frozen=True)
class DatasetConfig:
    seed: int
    preset: str = "biased_classification"
    spec: dict | None = None
    canvas: tuple[int, int] = (32, 32)
    n_train: int = 1200
    n_test: int = 600


@dataclass(frozen=True)
class ArchConfig:
    channels: tuple[int, ...] = (16, 16)
    strides: tuple[int, ...] = ()
    global_context: bool = True


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 32
    lambda_hinge: float = 1.0
    lambda_neg: float = 0.5
    const_fraction: float = 0.25
    seed: int = 0
    tracker_decay: float = 0.9
    tracker_floor: float = 1e-3


@dataclass(frozen=True)
class AugmentationConfig:
    mode: str = "baseline"
    sampler: str = "random"


@dataclass(frozen=True)
class RemovalConfig:
    radius: int = 1
    backfill: str = "oracle_background"
    constant_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    size_gate: float = 0.30


@dataclass(frozen=True)
class MetricsConfig:
    alpha: float = 0.10


@dataclass(frozen=True)
class SplitsConfig:
    train_on: str = "full"


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    dataset: DatasetConfig
    arch: ArchConfig = field(default_factory=ArchConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    removal: RemovalConfig = field(default_factory=RemovalConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    splits: SplitsConfig = field(default_factory=SplitsConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @property
    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some section fields overridden, e.g. ``replace(training={"epochs": 2})``."""
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return parse_config(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def config_hash(d: dict) -> str:
    canonical = json.dumps(_plain(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _coerce(value: Any, typ: Any, path: str):
    text = str(typ)
    if typ is bool or text == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if typ is int or text == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if typ is float or text == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if typ is str or text == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if text.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        inner = "float" if "float" in text else "int"
        return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if text.startswith("dict"):
        if value is not None and not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {typ}")


def _section(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for name, f in fields.items():
        fpath = f"{path}.{name}" if path else name
        required = f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        if name not in raw:
            if required:
                raise ConfigError(fpath, "missing required key")
            continue
        if dataclasses.is_dataclass(f.type) or isinstance(f.type, str) and f.type.endswith("Config"):
            kwargs[name] = _section(_SECTIONS[name], raw[name], fpath)
        else:
            kwargs[name] = _coerce(raw[name], f.type, fpath)
    return cls(**kwargs)


_SECTIONS = {
    "dataset": DatasetConfig,
    "arch": ArchConfig,
    "training": TrainingConfig,
    "augmentation": AugmentationConfig,
    "removal": RemovalConfig,
    "metrics": MetricsConfig,
    "splits": SplitsConfig,
}


def _positive(value, path):
    if not value > 0:
        raise ConfigError(path, f"must be positive, got {value!r}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.task not in ("classifier", "segmenter"):
        raise ConfigError("task", f"must be 'classifier' or 'segmenter', got {cfg.task!r}")
    mode = cfg.augmentation.mode
    if mode not in MODES:
        raise ConfigError("augmentation.mode", f"must be one of {MODES}")
    allowed = CLASSIFIER_MODES if cfg.task == "classifier" else SEGMENTER_MODES
    if mode not in allowed:
        raise ConfigError("augmentation.mode", f"mode {mode!r} is not available for task {cfg.task!r}")
    if cfg.augmentation.sampler not in SAMPLERS:
        raise ConfigError("augmentation.sampler", f"must be one of {SAMPLERS}")
    if cfg.removal.backfill not in BACKFILLS:
        raise ConfigError("removal.backfill", f"must be one of {BACKFILLS}")
    if cfg.removal.radius < 0:
        raise ConfigError("removal.radius", "must be >= 0")
    if not 0 < cfg.removal.size_gate <= 1:
        raise ConfigError("removal.size_gate", "must lie in (0, 1]")
    if cfg.splits.train_on not in ("full", "cooccur"):
        raise ConfigError("splits.train_on", "must be 'full' or 'cooccur'")
    t = cfg.training
    for name in ("epochs", "lr", "batch"):
        _positive(getattr(t, name), f"training.{name}")
    for name in ("lambda_hinge", "lambda_neg", "tracker_floor"):
        _positive(getattr(t, name), f"training.{name}")
    if not 0 <= t.momentum < 1:
        raise ConfigError("training.momentum", "must lie in [0, 1)")
    if not 0 <= t.const_fraction <= 1:
        raise ConfigError("training.const_fraction", "must lie in [0, 1]")
    if not 0 <= t.tracker_decay < 1:
        raise ConfigError("training.tracker_decay", "must lie in [0, 1)")
    _positive(cfg.metrics.alpha, "metrics.alpha")
    d = cfg.dataset
    _positive(d.n_train, "dataset.n_train")
    _positive(d.n_test, "dataset.n_test")
    if len(d.canvas) != 2 or min(d.canvas) < 32:
        raise ConfigError("dataset.canvas", "must be [H, W] with both >= 32")
    if not cfg.arch.channels:
        raise ConfigError("arch.channels", "needs at least one conv layer")
    if cfg.arch.strides and len(cfg.arch.strides) != len(cfg.arch.channels):
        raise ConfigError("arch.strides", "must match arch.channels in length")
    return cfg


def parse_config(raw: dict) -> ExperimentConfig:
    return validate(_section(ExperimentConfig, raw, ""))


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return parse_config(raw)
