"""Penultimate-feature extraction and 2-D t-SNE projection of the three
sample categories: real non-defective, real defective, synthetic defective.

The projection runs exact (non-approximate) t-SNE, sized for a few hundred
points; inputs wider than 50 dimensions are first reduced with PCA, and the
reduction is recorded in the projection metadata.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE
from torch.utils.data import DataLoader

from .classifier import Backbone, ManifestImageDataset, TransferClassifier, \
    _eval_transform, build_classifier
from .ingestion import (
    LABEL_DEFECTIVE,
    SOURCE_REAL,
    DatasetManifest,
    ImageRecord,
)

CATEGORY_REAL_NONDEF = "real_nondef"
CATEGORY_REAL_DEF = "real_def"
CATEGORY_SYNTH_DEF = "synthetic_def"
CATEGORIES = (CATEGORY_REAL_NONDEF, CATEGORY_REAL_DEF, CATEGORY_SYNTH_DEF)

CATEGORY_COLORS = {
    CATEGORY_REAL_NONDEF: "tab:blue",
    CATEGORY_REAL_DEF: "tab:red",
    CATEGORY_SYNTH_DEF: "tab:orange",
}

_PCA_TARGET_DIM = 50


def categorize_record(record: ImageRecord) -> str:
    if record.label != LABEL_DEFECTIVE:
        return CATEGORY_REAL_NONDEF
    return CATEGORY_REAL_DEF if record.source == SOURCE_REAL else CATEGORY_SYNTH_DEF


@dataclass(frozen=True)
class FeatureMatrix:
    vectors: np.ndarray        # N x D
    categories: tuple          # length N, values in CATEGORIES
    paths: tuple               # length N, source image per row

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {v.shape}")
        if len(self.categories) != v.shape[0] or len(self.paths) != v.shape[0]:
            raise ValueError("categories and paths must have one entry per row")
        if not np.isfinite(v).all():
            raise ValueError("feature vectors contain non-finite entries")
        for c in self.categories:
            if c not in CATEGORIES:
                raise ValueError(f"unknown category {c!r}")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 2000
    seed: int = 42
    out_dim: int = 2

    def __post_init__(self):
        if self.perplexity <= 0:
            raise ValueError(f"perplexity must be positive, got {self.perplexity}")
        if self.iterations < 250:
            raise ValueError(f"iterations must be >= 250, got {self.iterations}")
        if self.out_dim < 1:
            raise ValueError(f"out_dim must be >= 1, got {self.out_dim}")

    def validate_for(self, n: int) -> None:
        if not self.perplexity < (n - 1) / 3:
            raise ValueError(
                f"perplexity {self.perplexity} too large for {n} samples; "
                f"need perplexity < (N-1)/3 = {(n - 1) / 3:.2f}"
            )


def extract_features(
    manifest: DatasetManifest,
    backbone,
    pretrained: bool = True,
    image_size: int = 128,
    batch_size: int = 32,
    seed: int = 0,
) -> FeatureMatrix:
    """One global-pooled penultimate vector per record; deterministic.

    backbone may be a Backbone kind (a frozen extractor is built here) or an
    already-built TransferClassifier whose backbone is reused.
    """
    if len(manifest) == 0:
        raise ValueError("manifest is empty; nothing to extract")
    if isinstance(backbone, TransferClassifier):
        model = backbone
    else:
        model = build_classifier(Backbone(backbone), pretrained=pretrained, seed=seed)
    model.eval()

    loader = DataLoader(
        ManifestImageDataset(manifest, _eval_transform(image_size)),
        batch_size=batch_size, shuffle=False, num_workers=0,
    )
    chunks = []
    with torch.no_grad():
        for x, _ in loader:
            chunks.append(model.backbone(x).flatten(1).cpu().numpy())
    vectors = np.concatenate(chunks, axis=0).astype(np.float64)
    return FeatureMatrix(
        vectors=vectors,
        categories=tuple(categorize_record(r) for r in manifest.records),
        paths=tuple(r.path for r in manifest.records),
    )


def projection_metadata(features: FeatureMatrix, cfg: TsneConfig) -> dict:
    return {
        "perplexity": cfg.perplexity,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "output_dim": cfg.out_dim,
        "input_dim": features.dim,
        "pca_pre_reduction": features.dim > _PCA_TARGET_DIM,
        "pca_components": _PCA_TARGET_DIM if features.dim > _PCA_TARGET_DIM else None,
        "method": "exact",
    }


def tsne_project(features: FeatureMatrix, cfg: TsneConfig) -> np.ndarray:
    """Exact t-SNE embedding, PCA-reduced first when D > 50.

    Identical (input, config) pairs give identical embeddings, and permuting
    input rows permutes output rows the same way.
    """
    cfg.validate_for(features.n)
    x = features.vectors
    if features.dim > _PCA_TARGET_DIM:
        x = PCA(n_components=_PCA_TARGET_DIM, random_state=cfg.seed).fit_transform(x)
    embedding = TSNE(
        n_components=cfg.out_dim,
        perplexity=cfg.perplexity,
        max_iter=cfg.iterations,
        random_state=cfg.seed,
        method="exact",
        init="pca",
    ).fit_transform(x)
    if not np.isfinite(embedding).all():
        raise RuntimeError("t-SNE produced non-finite coordinates")
    return embedding.astype(np.float64)


def _build_figure(embedding: np.ndarray, categories):
    import matplotlib.pyplot as plt

    if len(embedding) == 0:
        raise ValueError("embedding is empty; nothing to plot")
    if len(embedding) != len(categories):
        raise ValueError(
            f"embedding has {len(embedding)} rows but {len(categories)} categories"
        )
    fig, ax = plt.subplots(figsize=(7, 6))
    cats = np.asarray(categories)
    for cat in CATEGORIES:
        mask = cats == cat
        if mask.any():
            ax.scatter(embedding[mask, 0], embedding[mask, 1],
                       c=CATEGORY_COLORS[cat], label=cat, s=18, alpha=0.8)
    ax.set_xlabel("t-SNE dimension 1")
    ax.set_ylabel("t-SNE dimension 2")
    ax.legend()
    return fig, ax


def plot_embedding(embedding: np.ndarray, categories, out_path) -> Path:
    """Three-category scatter (blue real ND, red real D, orange synthetic D)."""
    import matplotlib.pyplot as plt

    fig, _ = _build_figure(embedding, categories)
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out_path


def write_embedding_csv(embedding: np.ndarray, categories, paths, out_path) -> Path:
    if not (len(embedding) == len(categories) == len(paths)):
        raise ValueError("embedding, categories, and paths must align")
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "category", "path"])
        for (x, y), cat, p in zip(embedding, categories, paths):
            writer.writerow([x, y, cat, p])
    return out_path
