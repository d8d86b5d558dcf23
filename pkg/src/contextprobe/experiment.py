"""Training, auditing and reporting pipelines behind the CLI."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augment, metrics, removal, tinymodel
from .config import ExperimentConfig, parse_config
from .presets import get_preset
from .scenegen import IGNORE, Dataset, Scene, SceneSpec, generate_dataset, label_of, load_dataset, save_dataset, split_dataset

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.cpw"


class TaskMismatch(ValueError):
    pass


# -- setup helpers ------------------------------------------------------------------

def build_spec(cfg: ExperimentConfig) -> SceneSpec:
    h, w = cfg.dataset.canvas
    if cfg.dataset.spec is not None:
        spec = SceneSpec.from_dict({**cfg.dataset.spec, "height": h, "width": w})
    else:
        spec = get_preset(cfg.dataset.preset, h, w)
    spec.validate()
    return spec


def held_out_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 7919]).generate_state(1, dtype=np.uint32)[0])


def backfill_policy(cfg: ExperimentConfig, mean_color) -> removal.BackfillPolicy:
    kind = cfg.removal.backfill
    if kind == "mask_only":
        return removal.BackfillPolicy.mask_only(mean_color)
    if kind == "constant":
        return removal.BackfillPolicy.constant(cfg.removal.constant_color)
    return removal.BackfillPolicy.oracle_background()


def arch_for(cfg: ExperimentConfig, spec: SceneSpec) -> tinymodel.ArchDescriptor:
    n_out = spec.K if cfg.task == "classifier" else spec.K + 1
    return tinymodel.ArchDescriptor(task=cfg.task, n_outputs=n_out, channels=tuple(cfg.arch.channels),
                                    strides=tuple(cfg.arch.strides), height=spec.height, width=spec.width,
                                    global_context=cfg.arch.global_context)


def label_vector(class_ids, k: int) -> np.ndarray:
    y = np.zeros(k, dtype=np.float32)
    y[sorted(class_ids)] = 1
    return y


def training_scenes(cfg: ExperimentConfig, ds: Dataset) -> list[Scene]:
    scenes = split_dataset(ds)[cfg.splits.train_on]
    if not scenes:
        raise ValueError(f"training split {cfg.splits.train_on!r} is empty")
    return scenes


# -- training -----------------------------------------------------------------------

@dataclass
class TrainState:
    params: tinymodel.ParameterVector
    history: list[dict] = field(default_factory=list)
    tracker: augment.ClassLossTracker | None = None


def _finite(loss: float, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise tinymodel.TrainingDivergence(f"non-finite loss at epoch {epoch}, step {step}")


def classifier_batch_loss(params, cfg, scenes, classes, k, policy, rng, with_grad=True) -> tinymodel.LossBundle:
    """Composite classifier loss for one batch of scenes under the configured mode."""
    mode = cfg.augmentation.mode
    t = cfg.training
    r = cfg.removal
    imgs = [s.image for s in scenes]
    targets = [label_vector(s.class_ids(), k) for s in scenes]
    groups: list[dict[int, int]] = []
    n_sel = 0
    if mode == "aug-rand":
        for s in scenes:
            ex = augment.make_augmented_example(s, classes, cfg.augmentation.sampler, "classify", rng,
                                                radius=r.radius, policy=policy, size_gate=r.size_gate)
            if ex is not None:
                imgs.append(ex.image)
                targets.append(label_vector(ex.label_set, k))
    elif mode == "aug-const":
        n_sel = int(round(t.const_fraction * len(scenes)))
        chosen = sorted(rng.choice(len(scenes), size=n_sel, replace=False).tolist()) if n_sel else []
        for i in chosen:
            rows = {}
            for rec in removal.build_edited_set(scenes[i], classes, r.radius, policy, r.size_gate):
                rows[rec.removed_class] = len(imgs)
                imgs.append(rec.edited_image)
                targets.append(label_vector(set(scenes[i].class_ids()) - {rec.removed_class}, k))
            groups.append(rows)
    x = np.stack(imgs)
    logits, cache = tinymodel.classifier_apply(params, x)
    bce, dl = tinymodel.multilabel_bce(logits, np.stack(targets))
    hinge = 0.0
    if groups:
        for rows in groups:
            val, grads = tinymodel.context_hinge_loss({c: logits[row] for c, row in rows.items()})
            hinge += val / n_sel
            for c, row in rows.items():
                dl[row] += t.lambda_hinge * grads[c] / n_sel
    breakdown = {"bce": bce, "hinge": t.lambda_hinge * hinge, "seg_ce": 0.0, "seg_neg": 0.0}
    grad = tinymodel.backward(params, cache, dl) if with_grad else np.zeros(0)
    return tinymodel.LossBundle(loss=bce + t.lambda_hinge * hinge, grad=grad, breakdown=breakdown)


def _per_class_pixel_loss(logits: np.ndarray, labels: np.ndarray, k: int) -> dict[int, float]:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = {}
    for c in range(k):
        m = labels == label_of(c)
        if m.any():
            lab = np.full(m.sum(), label_of(c))
            out[c] = float(-logp[m][np.arange(lab.size), lab].mean())
    return out


def segmenter_batch_loss(params, cfg, scenes, classes, k, policy, rng, tracker, with_grad=True):
    mode = cfg.augmentation.mode
    t = cfg.training
    r = cfg.removal
    items = [(s.image, s.labels, "plain", None, None) for s in scenes]
    if mode != "baseline":
        task_mode = {"seg-ignore": "seg-ignore", "seg-neg": "seg-negative", "no-removal-ignore": "no-removal-ignore"}[mode]
        for s in scenes:
            ex = augment.make_augmented_example(s, classes, cfg.augmentation.sampler, task_mode, rng, radius=r.radius,
                                                policy=policy, tracker=tracker, size_gate=r.size_gate)
            if ex is None:
                continue
            if mode == "seg-neg":
                items.append((ex.image, ex.labels, "negative", ex.removed_class, ex.record.dilated_mask))
            else:
                items.append((ex.image, ex.labels, "ignore", None, None))
    x = np.stack([it[0] for it in items])
    logits, cache = tinymodel.segmenter_apply(params, x)
    n = len(items)
    dl = np.zeros_like(logits)
    ce = neg = 0.0
    for i, (_, labels, m, rc, em) in enumerate(items):
        _, g, bd = tinymodel.seg_loss(logits[i], labels, m, rc, em, t.lambda_neg)
        dl[i] = g / n
        ce += bd["seg_ce"] / n
        neg += bd["seg_neg"] / n
    observed: dict[int, list[float]] = {}
    for i in range(len(scenes)):
        for c, v in _per_class_pixel_loss(logits[i], scenes[i].labels, k).items():
            observed.setdefault(c, []).append(v)
    grad = tinymodel.backward(params, cache, dl) if with_grad else np.zeros(0)
    bundle = tinymodel.LossBundle(loss=ce + neg, grad=grad, breakdown={"bce": 0.0, "hinge": 0.0, "seg_ce": ce, "seg_neg": neg})
    return bundle, {c: float(np.mean(v)) for c, v in observed.items()}


def train(cfg: ExperimentConfig, scenes: Sequence[Scene], spec: SceneSpec, mean_color) -> TrainState:
    """Mini-batch SGD with momentum; fully determined by the config and the scenes."""
    t = cfg.training
    arch = arch_for(cfg, spec)
    params = tinymodel.init_params(arch, t.seed)
    classes = spec.classes
    k = spec.K
    policy = backfill_policy(cfg, mean_color)
    rng = np.random.default_rng(np.random.SeedSequence([t.seed, 1]))
    tracker = augment.ClassLossTracker.create(k, decay=t.tracker_decay, floor=t.tracker_floor)
    state = TrainState(params=params, tracker=tracker)
    velocity = None
    scenes = list(scenes)
    for epoch in range(t.epochs):
        order = rng.permutation(len(scenes))
        sums: dict[str, float] = {}
        steps = 0
        for step, start in enumerate(range(0, len(scenes), t.batch)):
            batch = [scenes[i] for i in order[start : start + t.batch]]
            if cfg.task == "classifier":
                bundle = classifier_batch_loss(state.params, cfg, batch, classes, k, policy, rng)
            else:
                bundle, observed = segmenter_batch_loss(state.params, cfg, batch, classes, k, policy, rng, state.tracker)
                for c in sorted(observed):
                    state.tracker = augment.update_tracker(state.tracker, c, observed[c])
            _finite(bundle.loss, epoch, step)
            values, velocity = tinymodel.sgd_step(state.params.values, bundle.grad, velocity, t.lr, t.momentum)
            state.params = state.params.with_values(values)
            for name, v in {"loss": bundle.loss, **bundle.breakdown}.items():
                sums[name] = sums.get(name, 0.0) + v
            steps += 1
        record = {"epoch": epoch, **{k_: v / steps for k_, v in sums.items()}}
        state.history.append(record)
        log.info("epoch %d loss %.4f", epoch, record["loss"])
    return state


# -- evaluation ---------------------------------------------------------------------

def classifier_logits(params, images: np.ndarray, batch: int = 128) -> np.ndarray:
    images = np.asarray(images)
    return np.concatenate([tinymodel.classifier_apply(params, images[i : i + batch])[0]
                           for i in range(0, len(images), batch)])


def evaluate_classifier(params, scenes: Sequence[Scene], k: int) -> dict:
    if not scenes:
        return {"map": None, "ap": {}, "n": 0}
    logits = classifier_logits(params, np.stack([s.image for s in scenes]))
    targets = np.stack([label_vector(s.class_ids(), k) for s in scenes])
    m, ap = metrics.mean_average_precision(logits, targets)
    return {"map": m, "ap": ap, "n": len(scenes)}


def evaluate_segmenter(params, scenes: Sequence[Scene]) -> dict:
    if not scenes:
        return {"miou": None, "pixel_accuracy": None, "n": 0}
    preds = tinymodel.predict_labels(params, np.stack([s.image for s in scenes]))
    perf = metrics.seg_perf(list(preds), [s.labels for s in scenes])
    return {"miou": perf["miou"], "pixel_accuracy": perf["pixel_accuracy"],
            "per_label_iou": perf["per_label_iou"], "n": len(scenes)}


def evaluate(params, cfg: ExperimentConfig, scenes: Sequence[Scene], k: int) -> dict:
    if cfg.task == "classifier":
        return evaluate_classifier(params, scenes, k)
    return evaluate_segmenter(params, scenes)


def evaluate_splits(params, cfg, ds: Dataset) -> dict:
    return {name: evaluate(params, cfg, scenes, ds.spec.K) for name, scenes in split_dataset(ds).items()}


# -- audit --------------------------------------------------------------------------

def _edit_sets(scenes, classes, cfg, policy, control):
    r = cfg.removal
    return [removal.build_edited_set(s, classes, r.radius, policy, r.size_gate, control=control) for s in scenes]


def score_table(params, scenes, edit_sets, provenance=None) -> metrics.ScoreTable:
    flat = [rec.edited_image for recs in edit_sets for rec in recs]
    orig = classifier_logits(params, np.stack([s.image for s in scenes]))
    edited = classifier_logits(params, np.stack(flat)) if flat else np.zeros((0, orig.shape[1]))
    table = metrics.ScoreTable(provenance=dict(provenance or {}))
    pos = 0
    for s, o, recs in zip(scenes, orig, edit_sets):
        table.add(s.scene_id, o, {rec.removed_class: edited[pos + q] for q, rec in enumerate(recs)})
        pos += len(recs)
    return table


def audit_classifier(params, cfg: ExperimentConfig, ds: Dataset, provenance=None) -> metrics.RobustnessReport:
    spec, scenes = ds.spec, ds.scenes
    k = spec.K
    policy = backfill_policy(cfg, ds.mean_color)
    edits = _edit_sets(scenes, spec.classes, cfg, policy, control=False)
    controls = [[c for c in recs if not c.degenerate] for recs in _edit_sets(scenes, spec.classes, cfg, policy, control=True)]
    table = score_table(params, scenes, edits, provenance)
    control_table = score_table(params, scenes, controls, provenance)
    v = metrics.v_metrics(table)
    cv = metrics.v_metrics(control_table)
    perf = evaluate_classifier(params, scenes, k)
    per_class = {}
    for c in range(k):
        row = {"ap": perf["ap"].get(c), "vmin": None, "vmean": None, "eligible_n": 0, "control_vmin": None}
        if c in v:
            row.update(vmin=v[c].vmin, vmean=v[c].vmean, eligible_n=v[c].eligible_n)
        if c in cv:
            row["control_vmin"] = cv[c].vmin
        per_class[c] = row
    vmin, vmean = metrics.mean_v(v)
    cvmin, _ = metrics.mean_v(cv)
    return metrics.RobustnessReport(
        task="classifier", n_classes=k, alpha=cfg.metrics.alpha, radius=cfg.removal.radius,
        backfill=policy.describe(), config_hash=cfg.config_hash, provenance=dict(provenance or {}),
        per_class=per_class,
        summary={"map": perf["map"], "vmin": vmin, "vmean": vmean, "control_vmin": cvmin, "n_scenes": len(scenes)},
        nc=metrics.nc_matrix(scenes, k),
    )


def segmenter_ar(params, scenes, edit_sets, k, alpha) -> metrics.ARResult:
    orig = tinymodel.predict_labels(params, np.stack([s.image for s in scenes]))
    flat = [rec.edited_image for recs in edit_sets for rec in recs]
    edited = tinymodel.predict_labels(params, np.stack(flat)) if flat else np.zeros((0,) + scenes[0].shape)
    per_scene, pos = [], 0
    for recs in edit_sets:
        per_scene.append([metrics.EditPrediction(rec.removed_class, rec.dilated_mask, edited[pos + q])
                          for q, rec in enumerate(recs)])
        pos += len(recs)
    return metrics.ar_matrix([s.labels for s in scenes], list(orig), per_scene,
                             [s.class_ids() for s in scenes], k, alpha)


def audit_segmenter(params, cfg: ExperimentConfig, ds: Dataset, provenance=None) -> metrics.RobustnessReport:
    spec, scenes = ds.spec, ds.scenes
    k = spec.K
    policy = backfill_policy(cfg, ds.mean_color)
    alpha = cfg.metrics.alpha
    edits = _edit_sets(scenes, spec.classes, cfg, policy, control=False)
    controls = [[c for c in recs if not c.degenerate] for recs in _edit_sets(scenes, spec.classes, cfg, policy, control=True)]
    res = segmenter_ar(params, scenes, edits, k, alpha)
    ctl = segmenter_ar(params, scenes, controls, k, alpha)
    perf = evaluate_segmenter(params, scenes)
    per_class = {}
    for c in range(k):
        row = res.ar[c]
        per_class[c] = {
            "iou": perf["per_label_iou"].get(label_of(c)),
            "max_ar": float(np.nanmax(row)) if np.isfinite(row).any() else None,
            "control_max_ar": float(np.nanmax(ctl.ar[c])) if np.isfinite(ctl.ar[c]).any() else None,
        }
    both = np.isfinite(res.ar) & np.isfinite(ctl.ar)
    return metrics.RobustnessReport(
        task="segmenter", n_classes=k, alpha=alpha, radius=cfg.removal.radius, backfill=policy.describe(),
        config_hash=cfg.config_hash, provenance=dict(provenance or {}), per_class=per_class,
        summary={"miou": perf["miou"], "pixel_accuracy": perf["pixel_accuracy"],
                 "ar_mean": float(res.ar[both].mean()) if both.any() else None,
                 "control_ar_mean": float(ctl.ar[both].mean()) if both.any() else None,
                 "n_scenes": len(scenes)},
        ar=res.ar, ar_counts=res.pairs, mean_delta_iou=res.mean_delta, control_ar=ctl.ar, control_counts=ctl.pairs,
        nc=metrics.nc_matrix(scenes, k),
    )


def _label_signature(spec) -> list:
    return sorted((c.class_id, c.name, c.shape, c.is_stuff) for c in spec.classes)


def audit(params, cfg, ds, provenance=None) -> metrics.RobustnessReport:
    if params.arch.task != cfg.task:
        raise TaskMismatch(f"checkpoint is a {params.arch.task}, config says {cfg.task}")
    if (params.arch.height, params.arch.width) != (ds.spec.height, ds.spec.width):
        raise TaskMismatch("checkpoint canvas does not match the dataset")
    expected = ds.spec.K if cfg.task == "classifier" else ds.spec.K + 1
    if params.arch.n_outputs != expected:
        raise TaskMismatch(f"checkpoint has {params.arch.n_outputs} outputs, dataset needs {expected}")
    if _label_signature(build_spec(cfg)) != _label_signature(ds.spec):
        raise TaskMismatch("dataset classes differ from the ones the checkpoint was trained on")
    if cfg.task == "classifier":
        return audit_classifier(params, cfg, ds, provenance)
    return audit_segmenter(params, cfg, ds, provenance)


# -- commands -----------------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    checkpoint: str
    seed: int
    metrics: dict
    wall_clock: float
    history: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(metrics._clean(asdict(self)), indent=1, sort_keys=True) + "\n"


def _dataset_root(path: str | Path, part: str) -> Path:
    p = Path(path)
    if (p / "manifest.json").exists():
        return p
    if (p / part / "manifest.json").exists():
        return p / part
    raise FileNotFoundError(f"no dataset found at {p} (looked for manifest.json and {part}/manifest.json)")


def cmd_gen(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    """Write ``train/`` and ``test/`` datasets plus the normalised config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = build_spec(cfg)
    seed = cfg.dataset.seed
    save_dataset(generate_dataset(spec, cfg.dataset.n_train, seed), out / "train")
    save_dataset(generate_dataset(spec, cfg.dataset.n_test, held_out_seed(seed)), out / "test")
    (out / "config.json").write_text(cfg.to_json())
    return out


def cmd_train(cfg: ExperimentConfig, dataset_dir: str | Path, out_dir: str | Path) -> RunRecord:
    start = time.perf_counter()
    train_ds = load_dataset(_dataset_root(dataset_dir, "train"))
    scenes = training_scenes(cfg, train_ds)
    state = train(cfg, scenes, train_ds.spec, train_ds.mean_color)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    tinymodel.save_checkpoint(state.params, ckpt, extra={"config": cfg.to_dict(), "config_hash": cfg.config_hash})
    results = {}
    try:
        test_ds = load_dataset(_dataset_root(dataset_dir, "test"))
        results = evaluate_splits(state.params, cfg, test_ds)
    except FileNotFoundError:
        log.warning("no test dataset next to %s; skipping evaluation", dataset_dir)
    record = RunRecord(config_hash=cfg.config_hash, checkpoint=str(ckpt), seed=cfg.training.seed, metrics=results,
                       wall_clock=time.perf_counter() - start, history=state.history)
    (out / "run_record.json").write_text(record.to_json())
    return record


def cmd_audit(checkpoint: str | Path, dataset_dir: str | Path, alpha: float | None = None,
              out: str | Path | None = None) -> metrics.RobustnessReport:
    params, header = tinymodel.load_checkpoint(checkpoint)
    if "config" not in header:
        raise TaskMismatch("checkpoint carries no experiment config")
    cfg = parse_config(header["config"])
    if alpha is not None:
        cfg = cfg.replace(metrics={"alpha": alpha})
    root = _dataset_root(dataset_dir, "test")
    ds = load_dataset(root)
    report = audit(params, cfg, ds, provenance={"checkpoint": Path(checkpoint).name,
                                                "checkpoint_config_hash": header.get("config_hash", ""),
                                                "dataset": root.name, "dataset_seed": ds.seed})
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(report.to_json())
    return report


REPORT_FORMATS = ("json", "csv", "plot")


def _fmt(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def report_csv(report: metrics.RobustnessReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if report.task == "classifier":
        w.writerow(["class_id", "AP", "Vmin", "Vmean", "eligible_n"])
        for c in range(report.n_classes):
            row = report.per_class.get(str(c), {})
            w.writerow([c, _fmt(row.get("ap")), _fmt(row.get("vmin")), _fmt(row.get("vmean")), row.get("eligible_n", 0)])
    else:
        w.writerow(["class_id", "IoU", "max_AR", "control_max_AR"])
        for c in range(report.n_classes):
            row = report.per_class.get(str(c), {})
            w.writerow([c, _fmt(row.get("iou")), _fmt(row.get("max_ar")), _fmt(row.get("control_max_ar"))])
    return buf.getvalue()


def ar_csv(matrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["c_i\\c_j"] + list(range(len(matrix))))
    for i, row in enumerate(matrix):
        w.writerow([i] + [_fmt(v) for v in row])
    return buf.getvalue()


def plot_series(report: metrics.RobustnessReport) -> dict[str, str]:
    """Two-column plain-text series keyed by file name."""
    files = {}
    if report.task == "classifier":
        lines = ["# AP Vmin  (one point per class with an eligible image)"]
        for c in range(report.n_classes):
            row = report.per_class.get(str(c), {})
            if row.get("eligible_n", 0) >= 1 and row.get("ap") is not None:
                lines.append(f"{row['ap']!r} {row['vmin']!r}")
        files["scatter_ap_vmin.dat"] = "\n".join(lines) + "\n"
    else:
        lines = ["# IoU max_AR  (one point per class with a co-occurring removal)"]
        for c in range(report.n_classes):
            row = report.per_class.get(str(c), {})
            if row.get("max_ar") is not None and row.get("iou") is not None:
                lines.append(f"{row['iou']!r} {row['max_ar']!r}")
        files["scatter_iou_maxar.dat"] = "\n".join(lines) + "\n"
        heat = ["# pair_index AR  (pair_index = c_i * K + c_j)"]
        for i, row in enumerate(report.ar or []):
            for j, v in enumerate(row):
                if v is not None:
                    heat.append(f"{i * report.n_classes + j} {v!r}")
        files["ar_heatmap.dat"] = "\n".join(heat) + "\n"
    return files


def cmd_report(report: metrics.RobustnessReport | str | Path, fmt: str, out_dir: str | Path) -> list[Path]:
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {REPORT_FORMATS}")
    if not isinstance(report, metrics.RobustnessReport):
        report = metrics.RobustnessReport.from_json(Path(report).read_text())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "json":
        written.append(out / "report.json")
        written[-1].write_text(report.to_json())
    elif fmt == "csv":
        written.append(out / "per_class.csv")
        written[-1].write_text(report_csv(report))
        if report.ar is not None:
            written.append(out / "ar_matrix.csv")
            written[-1].write_text(ar_csv(report.ar))
    else:
        for name, text in plot_series(report).items():
            written.append(out / name)
            written[-1].write_text(text)
    return written
