"""Class weights, frozen-backbone contract, weighted loss algebra, training loop."""

import hashlib
import json
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from defectdiff import classifier as clf_mod
from defectdiff.classifier import (
    Backbone,
    ClassifierTrainConfig,
    ClassWeights,
    ManifestImageDataset,
    PARAMETER_CLAIMS,
    Prediction,
    _eval_transform,
    _train_transform,
    build_classifier,
    compute_class_weights,
    load_classifier,
    predict,
    save_classifier,
    stock_parameter_count,
    train_classifier,
    trainable_fraction,
    weighted_bce,
    write_history,
)
from defectdiff.errors import TrainingDivergedError, WeightsUnavailableError
from defectdiff.ingestion import load_binary_folders, stratified_split
from defectdiff.toydata import make_binary_corpus


@pytest.fixture(scope="module")
def toy_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    nd, dd = make_binary_corpus(root, n_nondef=24, n_def=16, size=32, seed=1)
    manifest = load_binary_folders(nd, dd)
    return stratified_split(manifest, 0.25, seed=0)


def quick_config(**overrides):
    defaults = dict(learning_rate=1e-3, batch_size=8, max_epochs=2, image_size=32, seed=0)
    defaults.update(overrides)
    return ClassifierTrainConfig(**defaults)


def _state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.cpu().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------- class weights

def test_class_weights_reference_counts():
    w = compute_class_weights(209, 63)
    assert w.w0 == pytest.approx(272 / 250.8, abs=1e-12)
    assert w.w1 == pytest.approx(272 / 132.3, abs=1e-12)
    assert w.w0 == pytest.approx(1.08453, abs=5e-6)
    assert w.w1 == pytest.approx(2.05593, abs=5e-6)
    assert w.w1 > w.w0


def test_class_weights_balanced_counts():
    w = compute_class_weights(100, 100)
    assert w.w0 == pytest.approx(200 / 120, abs=1e-12)
    assert w.w1 == pytest.approx(200 / 210, abs=1e-12)


def test_class_weights_guard_zero_counts():
    with pytest.raises(ValueError):
        compute_class_weights(1, 0)
    with pytest.raises(ValueError):
        compute_class_weights(0, 1)
    with pytest.raises(ValueError):
        ClassWeights(w0=0.0, w1=1.0)


@given(n=st.integers(1, 10_000), d=st.integers(1, 10_000))
def test_class_weights_formula_exact(n, d):
    w = compute_class_weights(n, d)
    total = n + d
    assert abs(w.w0 - total / (n * 1.2)) <= 1e-12 * w.w0
    assert abs(w.w1 - total / (d * 2.1)) <= 1e-12 * w.w1
    # defective outweighs non-defective exactly when its divisor-adjusted
    # count is the smaller one
    assert (w.w1 > w.w0) == (2.1 * d < 1.2 * n)


# ---------------------------------------------------------------- config

def test_train_config_defaults():
    cfg = ClassifierTrainConfig()
    assert cfg.learning_rate == 1e-4
    assert cfg.batch_size == 32
    assert cfg.max_epochs == 5
    assert cfg.early_stop_patience == 5
    assert cfg.plateau_factor == 0.2
    assert cfg.plateau_patience == 3
    assert cfg.decision_threshold == 0.4
    assert cfg.rotation_degrees == 36.0
    assert cfg.zoom_range == (0.8, 1.2)
    assert cfg.contrast_range == (0.8, 1.2)


@pytest.mark.parametrize(
    "bad",
    [
        dict(decision_threshold=0.0),
        dict(decision_threshold=1.0),
        dict(learning_rate=0.0),
        dict(batch_size=0),
        dict(max_epochs=0),
        dict(plateau_factor=1.0),
        dict(zoom_range=(0.0, 1.2)),
        dict(contrast_range=(1.3, 0.8)),
        dict(rotation_degrees=-1.0),
    ],
)
def test_train_config_rejects_bad_values(bad):
    with pytest.raises(ValueError):
        ClassifierTrainConfig(**bad)


# --------------------------------------------------------------- backbones

@pytest.mark.parametrize("kind", list(Backbone))
def test_stock_architecture_sizes_match_nominal_claims(kind):
    assert stock_parameter_count(kind) == pytest.approx(
        PARAMETER_CLAIMS[kind], rel=0.01
    )


def test_backbone_is_frozen_and_head_small():
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    assert all(not p.requires_grad for p in model.backbone.parameters())
    assert all(p.requires_grad for p in model.head.parameters())
    assert trainable_fraction(model) < 0.05


def test_backbone_stays_in_eval_mode_during_training():
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    model.train()
    assert not model.backbone.training
    assert model.head.training


def test_head_structure():
    model = build_classifier(Backbone.RESNET50V2, pretrained=False, seed=0)
    flatten, dropout, linear = model.head
    assert isinstance(dropout, torch.nn.Dropout) and dropout.p == 0.2
    assert isinstance(linear, torch.nn.Linear)
    assert linear.in_features == 2048 and linear.out_features == 1


def test_pretrained_unavailable_names_cache_path():
    # No weight cache is shipped with the test environment, so the
    # pretrained path must fail with an actionable message.
    cache = str(torch.hub.get_dir())
    with pytest.raises(WeightsUnavailableError, match="checkpoints"):
        build_classifier(Backbone.MOBILENETV2, pretrained=True)
    try:
        build_classifier(Backbone.MOBILENETV2, pretrained=True)
    except WeightsUnavailableError as exc:
        assert cache in str(exc)


def test_forward_emits_one_logit_per_sample():
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    x = torch.randn(4, 3, 32, 32)
    out = model(x)
    assert out.shape == (4,)


# ------------------------------------------------------------ weighted loss

def test_unit_weights_reduce_to_plain_bce():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(16, generator=g)
    targets = (torch.rand(16, generator=g) > 0.6).float()
    ours = weighted_bce(logits, targets, ClassWeights(w0=1.0, w1=1.0))
    plain = F.binary_cross_entropy_with_logits(logits, targets)
    assert torch.allclose(ours, plain, atol=1e-7)


def test_doubling_defective_weight_doubles_its_contribution():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(12, generator=g)
    targets = torch.tensor([1.0] * 5 + [0.0] * 7)
    per_sample = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    part0 = float((per_sample * (1 - targets)).sum()) / 12 * 0.7
    part1 = float((per_sample * targets).sum()) / 12 * 1.3

    base = float(weighted_bce(logits, targets, ClassWeights(w0=0.7, w1=1.3)))
    doubled = float(weighted_bce(logits, targets, ClassWeights(w0=0.7, w1=2.6)))
    assert base == pytest.approx(part0 + part1, abs=1e-7)
    assert doubled == pytest.approx(part0 + 2 * part1, abs=1e-7)


# ---------------------------------------------------------------- training

def test_training_rejects_degenerate_manifests(toy_split):
    from defectdiff.ingestion import DatasetManifest

    train_m, val_m = toy_split
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    weights = ClassWeights(w0=1.0, w1=1.0)
    empty = DatasetManifest(records=())
    with pytest.raises(ValueError, match="nonempty"):
        train_classifier(model, empty, val_m, weights, quick_config())
    single = DatasetManifest(
        records=tuple(r for r in train_m.records if r.label == "defective")
    )
    with pytest.raises(ValueError, match="single class"):
        train_classifier(model, single, val_m, weights, quick_config())


def test_backbone_bit_identical_after_training(toy_split):
    train_m, val_m = toy_split
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    before = _state_hash(model.backbone)
    train_classifier(model, train_m, val_m, ClassWeights(w0=1.0, w1=1.0), quick_config())
    assert _state_hash(model.backbone) == before


def test_history_columns_and_epoch_numbering(toy_split, tmp_path):
    train_m, val_m = toy_split
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    cfg = quick_config(max_epochs=3)
    _, history = train_classifier(model, train_m, val_m, ClassWeights(1.0, 1.0), cfg)
    assert [h["epoch"] for h in history] == [1, 2, 3]
    assert history[0]["lr"] == cfg.learning_rate
    for row in history:
        assert set(row) == set(clf_mod.HISTORY_COLUMNS)
        assert np.isfinite(row["train_loss"]) and np.isfinite(row["val_loss"])

    out = write_history(history, tmp_path / "history.csv")
    lines = out.read_text().strip().splitlines()
    assert lines[0] == ",".join(clf_mod.HISTORY_COLUMNS)
    assert len(lines) == 4


def test_same_seed_reproduces_history(toy_split):
    train_m, val_m = toy_split
    losses = []
    for _ in range(2):
        model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=3)
        _, hist = train_classifier(model, train_m, val_m, ClassWeights(1.0, 1.0),
                                   quick_config(seed=7))
        losses.append([h["val_loss"] for h in hist])
    assert losses[0] == losses[1]


def test_best_validation_weights_are_restored(toy_split):
    train_m, val_m = toy_split
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    cfg = quick_config(max_epochs=4)
    weights = ClassWeights(w0=1.0, w1=1.0)
    model, history = train_classifier(model, train_m, val_m, weights, cfg)

    from torch.utils.data import DataLoader

    val_loader = DataLoader(ManifestImageDataset(val_m, _eval_transform(cfg.image_size)),
                            batch_size=8, shuffle=False)
    final_loss, _ = clf_mod._eval_epoch(model, val_loader, weights, cfg.decision_threshold)
    assert final_loss == pytest.approx(min(h["val_loss"] for h in history), abs=1e-6)


def test_plateau_reduces_lr_by_exact_factor(toy_split, monkeypatch):
    # Constant validation loss forces a plateau: with patience 1 the LR in
    # the epoch after two non-improving epochs is exactly old_lr * 0.2.
    train_m, val_m = toy_split
    flat_row = {
        "val_loss": 1.0, "val_accuracy": 0.5, "val_precision": 0.5,
        "val_recall": 0.5, "val_f1": 0.5, "val_roc_auc": 0.5,
    }
    monkeypatch.setattr(clf_mod, "_eval_epoch", lambda *a, **k: (1.0, dict(flat_row)))
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    cfg = quick_config(learning_rate=0.01, max_epochs=4, plateau_patience=1,
                       early_stop_patience=10)
    _, history = train_classifier(model, train_m, val_m, ClassWeights(1.0, 1.0), cfg)
    lrs = [h["lr"] for h in history]
    assert lrs[:3] == [0.01, 0.01, 0.01]
    assert lrs[3] == 0.01 * 0.2


def test_early_stopping_fires_on_flat_validation(toy_split, monkeypatch):
    train_m, val_m = toy_split
    flat_row = {
        "val_loss": 1.0, "val_accuracy": 0.5, "val_precision": 0.5,
        "val_recall": 0.5, "val_f1": 0.5, "val_roc_auc": 0.5,
    }
    monkeypatch.setattr(clf_mod, "_eval_epoch", lambda *a, **k: (1.0, dict(flat_row)))
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    cfg = quick_config(max_epochs=10, early_stop_patience=1)
    _, history = train_classifier(model, train_m, val_m, ClassWeights(1.0, 1.0), cfg)
    assert len(history) == 2  # first epoch improves from inf, second triggers


def test_default_patience_is_inert_within_max_epochs(toy_split, monkeypatch):
    # patience 5 under max_epochs 5 can never fire: at most 4 bad epochs.
    train_m, val_m = toy_split
    flat_row = {
        "val_loss": 1.0, "val_accuracy": 0.5, "val_precision": 0.5,
        "val_recall": 0.5, "val_f1": 0.5, "val_roc_auc": 0.5,
    }
    monkeypatch.setattr(clf_mod, "_eval_epoch", lambda *a, **k: (1.0, dict(flat_row)))
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    cfg = quick_config(max_epochs=5, early_stop_patience=5)
    _, history = train_classifier(model, train_m, val_m, ClassWeights(1.0, 1.0), cfg)
    assert len(history) == 5


def test_divergence_aborts(toy_split, monkeypatch):
    train_m, val_m = toy_split
    monkeypatch.setattr(
        clf_mod, "weighted_bce",
        lambda logits, targets, weights: torch.tensor(float("inf"), requires_grad=True),
    )
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        train_classifier(model, train_m, val_m, ClassWeights(1.0, 1.0), quick_config())


def test_augmentation_is_stochastic_on_train_only(toy_split):
    train_m, _ = toy_split
    cfg = quick_config()
    aug_ds = ManifestImageDataset(train_m, _train_transform(cfg))
    torch.manual_seed(0)
    a, _ = aug_ds[0]
    b, _ = aug_ds[0]
    assert not torch.equal(a, b)

    eval_ds = ManifestImageDataset(train_m, _eval_transform(cfg.image_size))
    c, _ = eval_ds[0]
    d, _ = eval_ds[0]
    assert torch.equal(c, d)


def test_separable_corpus_reaches_high_validation_accuracy(tmp_path):
    # Learnability smoke oracle: by construction the classes differ in a
    # bright streak, so five epochs of head training must separate them.
    nd, dd = make_binary_corpus(tmp_path, n_nondef=60, n_def=40, size=64, seed=1)
    manifest = load_binary_folders(nd, dd)
    train_m, val_m = stratified_split(manifest, 0.2, seed=0)
    model = build_classifier(Backbone.RESNET50V2, pretrained=False, seed=0)
    weights = compute_class_weights(train_m.count(label="non_defective"),
                                    train_m.count(label="defective"))
    cfg = ClassifierTrainConfig(learning_rate=2e-3, batch_size=8, max_epochs=5,
                                image_size=64, seed=0)
    _, history = train_classifier(model, train_m, val_m, weights, cfg)
    assert history[-1]["val_accuracy"] >= 0.95


# ---------------------------------------------------------------- predict

def test_predict_rows_align_with_manifest(toy_split):
    train_m, val_m = toy_split
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    preds = predict(model, val_m, threshold=0.4, image_size=32)
    assert len(preds) == len(val_m)
    for p, r in zip(preds, val_m.records):
        assert isinstance(p, Prediction)
        assert p.path == r.path
        assert 0.0 <= p.score <= 1.0
        assert p.label in (0, 1)


def test_predict_threshold_zero_marks_everything_defective(toy_split):
    _, val_m = toy_split
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    preds = predict(model, val_m, threshold=0.0, image_size=32)
    assert all(p.label == 1 for p in preds)


def test_predict_threshold_boundary_is_inclusive(toy_split):
    _, val_m = toy_split
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    base = predict(model, val_m, threshold=0.5, image_size=32)
    pivot = base[0].score
    at = predict(model, val_m, threshold=pivot, image_size=32)
    assert at[0].label == 1
    above = predict(model, val_m, threshold=np.nextafter(pivot, 1.0), image_size=32)
    assert above[0].label == 0


def test_predict_is_deterministic(toy_split):
    _, val_m = toy_split
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    a = predict(model, val_m, threshold=0.4, image_size=32)
    b = predict(model, val_m, threshold=0.4, image_size=32)
    assert [p.score for p in a] == [p.score for p in b]


def test_predict_propagates_undecodable_image(tmp_path):
    from defectdiff.ingestion import DatasetManifest, ImageRecord

    bogus = tmp_path / "fake.png"
    bogus.write_text("not an image")
    manifest = DatasetManifest(records=(
        ImageRecord(path=str(bogus), label="defective", source="real"),
    ))
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=0)
    with pytest.raises(Exception):
        predict(model, manifest, threshold=0.4, image_size=32)


# ------------------------------------------------------------- persistence

def test_save_load_round_trip(toy_split, tmp_path):
    train_m, val_m = toy_split
    model = build_classifier(Backbone.MOBILENETV2, pretrained=False, seed=5)
    cfg = quick_config(max_epochs=1)
    model, _ = train_classifier(model, train_m, val_m, ClassWeights(1.0, 1.0), cfg)
    out = save_classifier(model, tmp_path / "ckpt", cfg, pretrained=False, seed=5)

    meta = json.loads((out / "classifier_meta.json").read_text())
    assert meta["backbone"] == "mobilenetv2"
    assert meta["normalization"]["mean"] == list(clf_mod.IMAGENET_MEAN)

    reloaded = load_classifier(out)
    orig = predict(model, val_m, threshold=0.4, image_size=32)
    copy_ = predict(reloaded, val_m, threshold=0.4, image_size=32)
    assert [p.score for p in orig] == pytest.approx([p.score for p in copy_], abs=1e-6)
