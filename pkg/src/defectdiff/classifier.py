"""Transfer-learning binary classifiers over three frozen backbone families.

The backbone (resnet50v2-like, efficientnetb0-like, or mobilenetv2-like)
stays frozen and in eval mode throughout; only a small head (global average
pool, dropout 0.2, single logistic unit) trains. Loss is class-weighted
binary cross-entropy; the schedule is reduce-on-plateau with early stopping
on validation loss.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import DataLoader, Dataset
from torchvision import models, transforms

from .errors import TrainingDivergedError, WeightsUnavailableError
from .ingestion import LABEL_DEFECTIVE, DatasetManifest
from .metrics import accuracy, classify_scores, confusion, f1, precision, recall, roc_auc

# Normalization pinned to the backbone pretraining convention.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Eq-style divisor constants for the class-weight formula.
_NONDEF_WEIGHT_DIVISOR = 1.2
_DEF_WEIGHT_DIVISOR = 2.1

HEAD_WEIGHTS_FILE = "head_weights.pt"
CLASSIFIER_META_FILE = "classifier_meta.json"
HISTORY_FILE = "history.csv"

HISTORY_COLUMNS = (
    "epoch", "lr", "train_loss", "val_loss",
    "val_accuracy", "val_precision", "val_recall", "val_f1", "val_roc_auc",
)


class Backbone(str, Enum):
    RESNET50V2 = "resnet50v2"
    EFFICIENTNETB0 = "efficientnetb0"
    MOBILENETV2 = "mobilenetv2"


# Nominal full-architecture sizes the three families are known by.
PARAMETER_CLAIMS = {
    Backbone.RESNET50V2: 25_600_000,
    Backbone.EFFICIENTNETB0: 5_300_000,
    Backbone.MOBILENETV2: 3_500_000,
}

_FEATURE_DIMS = {
    Backbone.RESNET50V2: 2048,
    Backbone.EFFICIENTNETB0: 1280,
    Backbone.MOBILENETV2: 1280,
}


@dataclass(frozen=True)
class ClassWeights:
    w0: float  # non-defective
    w1: float  # defective

    def __post_init__(self):
        if self.w0 <= 0 or self.w1 <= 0:
            raise ValueError(f"class weights must be positive, got ({self.w0}, {self.w1})")


def compute_class_weights(n_nondef: int, n_def: int) -> ClassWeights:
    """w0 = N/(N_nd * 1.2), w1 = N/(N_d * 2.1); exact arithmetic, no rounding."""
    if n_nondef < 1 or n_def < 1:
        raise ValueError(f"both class counts must be >= 1, got ({n_nondef}, {n_def})")
    total = n_nondef + n_def
    return ClassWeights(
        w0=total / (n_nondef * _NONDEF_WEIGHT_DIVISOR),
        w1=total / (n_def * _DEF_WEIGHT_DIVISOR),
    )


@dataclass(frozen=True)
class ClassifierTrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 5
    early_stop_patience: int = 5  # inert at the default max_epochs=5
    plateau_factor: float = 0.2
    plateau_patience: int = 3
    decision_threshold: float = 0.4
    image_size: int = 128
    augment: bool = True
    rotation_degrees: float = 36.0     # +-20% of a half turn
    zoom_range: tuple = (0.8, 1.2)
    contrast_range: tuple = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.decision_threshold < 1.0):
            raise ValueError(f"decision_threshold must lie in (0,1), got {self.decision_threshold}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.early_stop_patience < 0 or self.plateau_patience < 0:
            raise ValueError("patience values must be >= 0")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValueError(f"plateau_factor must lie in (0,1), got {self.plateau_factor}")
        for name in ("zoom_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < low <= high, got ({lo}, {hi})")
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be >= 0")

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["zoom_range"] = list(self.zoom_range)
        d["contrast_range"] = list(self.contrast_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierTrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown classifier config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("zoom_range", "contrast_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class TransferClassifier(nn.Module):
    """Frozen feature extractor plus a trainable logistic head."""

    def __init__(self, kind: Backbone, backbone: nn.Module, feat_dim: int):
        super().__init__()
        self.kind = kind
        self.feat_dim = feat_dim
        self.backbone = backbone
        self.backbone.requires_grad_(False)
        self.backbone.eval()
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Dropout(0.2),
            nn.Linear(feat_dim, 1),
        )

    def train(self, mode: bool = True):
        # Only the head toggles; the backbone stays in eval so its
        # normalization statistics never move.
        super().train(mode)
        self.backbone.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            feats = self.backbone(x)
        return self.head(feats).squeeze(-1)

    def predict_scores(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward(x))


def _torchvision_ctor(kind: Backbone):
    return {
        Backbone.RESNET50V2: (models.resnet50, models.ResNet50_Weights.DEFAULT),
        Backbone.EFFICIENTNETB0: (models.efficientnet_b0, models.EfficientNet_B0_Weights.DEFAULT),
        Backbone.MOBILENETV2: (models.mobilenet_v2, models.MobileNet_V2_Weights.DEFAULT),
    }[kind]


def stock_parameter_count(kind: Backbone) -> int:
    """Parameter count of the unmodified reference architecture."""
    ctor, _ = _torchvision_ctor(kind)
    model = ctor(weights=None)
    return sum(p.numel() for p in model.parameters())


def _feature_extractor(kind: Backbone, base: nn.Module) -> nn.Module:
    if kind is Backbone.RESNET50V2:
        # drop avgpool and fc, keep convolutional trunk
        trunk = nn.Sequential(*list(base.children())[:-2])
    else:
        trunk = base.features
    return nn.Sequential(trunk, nn.AdaptiveAvgPool2d(1))


def build_classifier(kind: Backbone, pretrained: bool = True, seed: int = 0) -> TransferClassifier:
    """Assemble a frozen-backbone classifier.

    pretrained=True loads the published backbone weights from the local
    torch hub cache (or downloads them); if they cannot be obtained the
    error names the cache directory to populate. pretrained=False gives a
    seeded random backbone, useful for offline smoke runs.
    """
    kind = Backbone(kind)
    ctor, weights = _torchvision_ctor(kind)
    torch.manual_seed(seed)
    if pretrained:
        try:
            base = ctor(weights=weights)
        except Exception as exc:
            cache = Path(torch.hub.get_dir()) / "checkpoints"
            raise WeightsUnavailableError(
                f"pretrained weights for {kind.value} could not be loaded; "
                f"place {weights.url.rsplit('/', 1)[-1]} under {cache} "
                f"or build with pretrained=False"
            ) from exc
    else:
        base = ctor(weights=None)
    return TransferClassifier(kind, _feature_extractor(kind, base), _FEATURE_DIMS[kind])


def trainable_fraction(model: TransferClassifier) -> float:
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    return trainable / total


def weighted_bce(logits: torch.Tensor, targets: torch.Tensor, weights: ClassWeights) -> torch.Tensor:
    """Mean over the batch of per-sample class-weighted BCE-with-logits."""
    sample_w = torch.where(
        targets >= 0.5,
        torch.full_like(targets, weights.w1),
        torch.full_like(targets, weights.w0),
    )
    return F.binary_cross_entropy_with_logits(logits, targets, weight=sample_w)


def _eval_transform(image_size: int):
    return transforms.Compose([
        transforms.Resize((image_size, image_size)),
        transforms.ToTensor(),
        transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
    ])


def _train_transform(cfg: ClassifierTrainConfig):
    if not cfg.augment:
        return _eval_transform(cfg.image_size)
    return transforms.Compose([
        transforms.Resize((cfg.image_size, cfg.image_size)),
        transforms.RandomHorizontalFlip(),
        transforms.RandomVerticalFlip(),
        transforms.RandomRotation(cfg.rotation_degrees),
        transforms.RandomAffine(degrees=0, scale=cfg.zoom_range),
        transforms.ColorJitter(contrast=cfg.contrast_range),
        transforms.ToTensor(),
        transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
    ])


class ManifestImageDataset(Dataset):
    def __init__(self, manifest: DatasetManifest, transform):
        self.records = list(manifest.records)
        self.transform = transform

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        record = self.records[idx]
        image = Image.open(record.path).convert("RGB")
        target = 1.0 if record.label == LABEL_DEFECTIVE else 0.0
        return self.transform(image), target


def _eval_epoch(model, loader, weights: ClassWeights, threshold: float):
    """Validation pass: weighted loss plus scores/labels for metrics."""
    model.eval()
    losses, scores, labels = [], [], []
    with torch.no_grad():
        for x, y in loader:
            logits = model(x)
            losses.append(float(weighted_bce(logits, y, weights)) * len(y))
            scores.extend(torch.sigmoid(logits).tolist())
            labels.extend(int(v) for v in y.tolist())
    val_loss = sum(losses) / len(labels)
    cm = confusion(scores, labels, threshold)
    row = {
        "val_loss": val_loss,
        "val_accuracy": accuracy(cm),
        "val_precision": precision(cm),
        "val_recall": recall(cm),
        "val_f1": f1(cm),
        "val_roc_auc": roc_auc(scores, labels) if len(set(labels)) == 2 else math.nan,
    }
    return val_loss, row


def train_classifier(
    model: TransferClassifier,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    weights: ClassWeights,
    cfg: ClassifierTrainConfig,
):
    """Head-only training; returns (model with best-val weights, history rows).

    Augmentation applies to training batches only. Validation loss drives
    both the plateau LR schedule and early stopping; the head weights from
    the best validation epoch are restored before returning.
    """
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise ValueError("train and val manifests must be nonempty")
    train_labels = {r.label for r in train_manifest.records}
    if len(train_labels) < 2:
        raise ValueError("training manifest contains a single class; need both labels")

    torch.manual_seed(cfg.seed)
    loader_gen = torch.Generator().manual_seed(cfg.seed)
    train_loader = DataLoader(
        ManifestImageDataset(train_manifest, _train_transform(cfg)),
        batch_size=cfg.batch_size, shuffle=True, generator=loader_gen, num_workers=0,
    )
    val_loader = DataLoader(
        ManifestImageDataset(val_manifest, _eval_transform(cfg.image_size)),
        batch_size=cfg.batch_size, shuffle=False, num_workers=0,
    )

    optimizer = torch.optim.Adam(model.head.parameters(), lr=cfg.learning_rate)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=cfg.plateau_factor, patience=cfg.plateau_patience
    )

    history = []
    best_loss = math.inf
    best_head = copy.deepcopy(model.head.state_dict())
    bad_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        lr = optimizer.param_groups[0]["lr"]
        model.train()
        running, seen = 0.0, 0
        for x, y in train_loader:
            logits = model(x)
            loss = weighted_bce(logits, y, weights)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss {loss.item()} in epoch {epoch}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(y)
            seen += len(y)

        val_loss, row = _eval_epoch(model, val_loader, weights, cfg.decision_threshold)
        history.append({"epoch": epoch, "lr": lr, "train_loss": running / seen, **row})

        if val_loss < best_loss:
            best_loss = val_loss
            best_head = copy.deepcopy(model.head.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
        scheduler.step(val_loss)
        if bad_epochs >= cfg.early_stop_patience:
            break

    model.head.load_state_dict(best_head)
    return model, history


@dataclass(frozen=True)
class Prediction:
    path: str
    score: float
    label: int


def predict(model: TransferClassifier, manifest: DatasetManifest, threshold: float,
            image_size: int = 128, batch_size: int = 32):
    """Score every record; label = defective iff score >= threshold."""
    loader = DataLoader(
        ManifestImageDataset(manifest, _eval_transform(image_size)),
        batch_size=batch_size, shuffle=False, num_workers=0,
    )
    model.eval()
    scores = []
    with torch.no_grad():
        for x, _ in loader:
            scores.extend(torch.sigmoid(model(x)).tolist())
    labels = classify_scores(scores, threshold)
    return [
        Prediction(path=r.path, score=s, label=l)
        for r, s, l in zip(manifest.records, scores, labels)
    ]


def write_history(history, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(history)
    return path


def save_classifier(model: TransferClassifier, out_dir, cfg: ClassifierTrainConfig,
                    pretrained: bool, seed: int) -> Path:
    """Head weights plus enough metadata to rebuild the frozen backbone."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.head.state_dict(), out_dir / HEAD_WEIGHTS_FILE)
    meta = {
        "backbone": model.kind.value,
        "feat_dim": model.feat_dim,
        "pretrained": pretrained,
        "seed": seed,
        "normalization": {"mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)},
        "train_config": cfg.to_dict(),
    }
    (out_dir / CLASSIFIER_META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_classifier(ckpt_dir) -> TransferClassifier:
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / CLASSIFIER_META_FILE).read_text())
    model = build_classifier(
        Backbone(meta["backbone"]), pretrained=meta["pretrained"], seed=meta["seed"]
    )
    state = torch.load(ckpt_dir / HEAD_WEIGHTS_FILE, map_location="cpu", weights_only=True)
    model.head.load_state_dict(state)
    return model
