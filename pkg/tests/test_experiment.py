import hashlib
import json
import math

import numpy as np
import pytest

from contextprobe import experiment as E
from contextprobe import metrics, tinymodel
from contextprobe.config import parse_config
from contextprobe.scenegen import generate_dataset

TINY_DATA = {"seed": 3, "n_train": 24, "n_test": 12}


def tiny_cfg(task="classifier", mode="baseline", **training):
    data = dict(TINY_DATA, preset="biased_classification" if task == "classifier" else "biased_segmentation")
    return parse_config({"task": task, "dataset": data, "arch": {"channels": [4]},
                         "training": {"epochs": 1, "batch": 8, **training},
                         "augmentation": {"mode": mode, "sampler": "hardneg" if mode == "seg-neg" else "random"}})


def dir_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _batch(cfg, n=8):
    spec = E.build_spec(cfg)
    ds = generate_dataset(spec, n, cfg.dataset.seed)
    params = tinymodel.init_params(E.arch_for(cfg, spec), 0)
    return spec, ds, params


@pytest.mark.parametrize("mode", ["baseline", "aug-rand", "aug-const"])
def test_classifier_breakdown_sums_to_loss(mode):
    cfg = tiny_cfg(mode=mode, const_fraction=0.5)
    spec, ds, params = _batch(cfg)
    rng = np.random.default_rng(0)
    b = E.classifier_batch_loss(params, cfg, ds.scenes, spec.classes, spec.K, E.backfill_policy(cfg, ds.mean_color), rng)
    assert abs(sum(b.breakdown.values()) - b.loss) <= 1e-6
    assert b.grad.shape == params.values.shape


def test_const_fraction_zero_disables_hinge():
    cfg = tiny_cfg(mode="aug-const", const_fraction=0.0)
    spec, ds, params = _batch(cfg)
    b = E.classifier_batch_loss(params, cfg, ds.scenes, spec.classes, spec.K,
                                E.backfill_policy(cfg, ds.mean_color), np.random.default_rng(0))
    assert b.breakdown["hinge"] == 0.0


@pytest.mark.parametrize("mode", ["baseline", "seg-ignore", "seg-neg", "no-removal-ignore"])
def test_segmenter_breakdown_sums_to_loss(mode):
    cfg = tiny_cfg("segmenter", mode)
    spec, ds, params = _batch(cfg)
    tracker = E.augment.ClassLossTracker.create(spec.K)
    b, observed = E.segmenter_batch_loss(params, cfg, ds.scenes, spec.classes, spec.K,
                                         E.backfill_policy(cfg, ds.mean_color), np.random.default_rng(0), tracker)
    assert abs(sum(b.breakdown.values()) - b.loss) <= 1e-6
    assert all(v >= 0 and math.isfinite(v) for v in observed.values())
    if mode != "seg-neg":
        assert b.breakdown["seg_neg"] == 0.0


def test_classifier_loss_gradient_float64():
    # whole-batch composite loss (BCE + hinge over edited sets) against finite differences
    from oracles import central_difference, max_relative_error
    cfg = parse_config({"task": "classifier", "dataset": TINY_DATA, "arch": {"channels": [2]},
                        "training": {"const_fraction": 1.0, "lambda_hinge": 2.0},
                        "augmentation": {"mode": "aug-const"}})
    spec, ds, params = _batch(cfg, n=2)
    params = params.astype(np.float64)
    scenes = [s for s in generate_dataset(spec, 40, 5).scenes if len(s.class_ids()) >= 2][:2]
    for s in scenes:
        s.image = s.image.astype(np.float64)
    policy = E.backfill_policy(cfg, ds.mean_color)

    def loss(v):
        p = params.with_values(v)
        return E.classifier_batch_loss(p, cfg, scenes, spec.classes, spec.K, policy,
                                       np.random.default_rng(0), with_grad=False).loss

    b = E.classifier_batch_loss(params, cfg, scenes, spec.classes, spec.K, policy, np.random.default_rng(0))
    assert b.breakdown["hinge"] > 0
    num = central_difference(loss, params.values, 1e-5)
    assert max_relative_error(b.grad, num) < 1e-4


def test_separable_baseline_learns():
    spec_dict = {
        "classes": [
            {"class_id": 0, "shape": "square", "base_color": [0.1, 0.2, 0.9], "size_range": [0.2, 0.28]},
            {"class_id": 1, "shape": "disc", "base_color": [0.9, 0.15, 0.1], "size_range": [0.2, 0.28]},
            {"class_id": 2, "shape": "triangle", "base_color": [0.15, 0.85, 0.2], "size_range": [0.22, 0.3]},
        ],
        "cooc": {"p_anchor": [0.5, 0.5, 0.5], "p_cond": [[0, 0, 0], [0, 0, 0], [0, 0, 0]], "max_objects": 4},
    }
    cfg = parse_config({"task": "classifier", "dataset": {"seed": 1, "spec": spec_dict, "n_train": 240},
                        "arch": {"channels": [8]}, "training": {"epochs": 5, "batch": 16, "lr": 0.05}})
    spec = E.build_spec(cfg)
    ds = generate_dataset(spec, 240, 1)
    state = E.train(cfg, ds.scenes, spec, ds.mean_color)
    assert E.evaluate_classifier(state.params, ds.scenes, 3)["map"] > 0.95


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    cfg = tiny_cfg(lr=1e30)
    spec = E.build_spec(cfg)
    ds = generate_dataset(spec, 16, 0)
    with pytest.raises(tinymodel.TrainingDivergence):
        E.train(cfg.replace(training={"epochs": 3}), ds.scenes, spec, ds.mean_color)


def test_empty_training_split():
    cfg = tiny_cfg().replace(splits={"train_on": "cooccur"})
    spec = E.build_spec(cfg)
    ds = generate_dataset(spec, 3, 0)
    ds.scenes = [s for s in ds.scenes if len(s.objects) == 1] or ds.scenes[:0]
    with pytest.raises(ValueError):
        E.training_scenes(cfg, ds)


@pytest.fixture(scope="module")
def classifier_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cls")
    cfg = tiny_cfg(mode="aug-const", const_fraction=0.5)
    E.cmd_gen(cfg, root / "data")
    rec = E.cmd_train(cfg, root / "data", root / "run")
    return cfg, root, rec


def test_gen_byte_identical(tmp_path):
    cfg = tiny_cfg()
    E.cmd_gen(cfg, tmp_path / "a")
    E.cmd_gen(cfg, tmp_path / "b")
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")


def test_train_checkpoint_deterministic(classifier_run, tmp_path):
    cfg, root, rec = classifier_run
    again = E.cmd_train(cfg, root / "data", tmp_path)
    assert (tmp_path / "model.cpw").read_bytes() == (root / "run" / "model.cpw").read_bytes()
    assert again.config_hash == rec.config_hash
    assert set(rec.metrics) == {"full", "cooccur", "single"}
    stored = json.loads((root / "run" / "run_record.json").read_text())
    assert stored["config_hash"] == cfg.config_hash and stored["seed"] == cfg.training.seed


def test_audit_classifier_report(classifier_run, tmp_path):
    cfg, root, _ = classifier_run
    before = dir_digest(root)
    rep = E.cmd_audit(root / "run" / "model.cpw", root / "data", out=tmp_path / "r.json")
    assert dir_digest(root) == before  # audit never mutates inputs
    assert rep.task == "classifier" and rep.config_hash == cfg.config_hash
    assert rep.alpha == cfg.metrics.alpha and rep.radius == cfg.removal.radius
    assert rep.backfill == "oracle_background"
    for row in rep.per_class.values():
        for key in ("vmin", "vmean", "control_vmin"):
            assert row[key] is None or 0 <= row[key] <= 1
    assert metrics.RobustnessReport.from_json((tmp_path / "r.json").read_text()) == rep
    again = E.cmd_audit(root / "run" / "model.cpw", root / "data")
    assert again.to_json() == rep.to_json()


def test_audit_alpha_override(classifier_run):
    _, root, _ = classifier_run
    assert E.cmd_audit(root / "run" / "model.cpw", root / "data", alpha=0.3).alpha == 0.3


def test_report_formats(classifier_run, tmp_path):
    _, root, _ = classifier_run
    rep = E.cmd_audit(root / "run" / "model.cpw", root / "data")
    (csv_path,) = E.cmd_report(rep, "csv", tmp_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "class_id,AP,Vmin,Vmean,eligible_n"
    assert len(lines) == 1 + rep.n_classes
    (json_path,) = E.cmd_report(rep, "json", tmp_path)
    assert metrics.RobustnessReport.from_json(json_path.read_text()) == rep
    (scatter,) = E.cmd_report(json_path, "plot", tmp_path)
    points = [l for l in scatter.read_text().splitlines() if not l.startswith("#")]
    eligible = [r for r in rep.per_class.values() if r["eligible_n"] >= 1 and r["ap"] is not None]
    assert len(points) == len(eligible)
    assert all(len(p.split()) == 2 for p in points)
    with pytest.raises(ValueError):
        E.cmd_report(rep, "xlsx", tmp_path)


def test_task_mismatch(classifier_run, tmp_path):
    _, root, _ = classifier_run
    E.cmd_gen(tiny_cfg("segmenter"), tmp_path / "seg")
    with pytest.raises(E.TaskMismatch):
        E.cmd_audit(root / "run" / "model.cpw", tmp_path / "seg")


def test_segmenter_pipeline(tmp_path):
    cfg = tiny_cfg("segmenter", "seg-neg")
    E.cmd_gen(cfg, tmp_path / "data")
    E.cmd_train(cfg, tmp_path / "data", tmp_path / "run")
    rep = E.cmd_audit(tmp_path / "run" / "model.cpw", tmp_path / "data")
    k = rep.n_classes
    ar = metrics.to_array(rep.ar)
    assert ar.shape == (k, k)
    finite = ~np.isnan(ar)
    assert ((ar[finite] >= 0) & (ar[finite] <= 1)).all()
    counts = np.array(rep.ar_counts)
    assert np.array_equal(finite, counts > 0)
    files = E.cmd_report(rep, "plot", tmp_path / "plots")
    assert {p.name for p in files} == {"scatter_iou_maxar.dat", "ar_heatmap.dat"}
    heat = [l for l in (tmp_path / "plots" / "ar_heatmap.dat").read_text().splitlines() if not l.startswith("#")]
    assert len(heat) == int(finite.sum())
    (csv_path, ar_path) = E.cmd_report(rep, "csv", tmp_path / "csv")
    assert ar_path.read_text().count("\n") == k + 1


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        E.cmd_train(tiny_cfg(), tmp_path / "nowhere", tmp_path / "run")
