"""Image-folder ingestion: manifests, DDPM preprocessing, and dataset splits.

Manifests are JSON lines, one record per line with path/label/source, so they
stay appendable and diffable. Synthetic records always carry the defective
label and never enter validation splits.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

LABEL_DEFECTIVE = "defective"
LABEL_NON_DEFECTIVE = "non_defective"
SOURCE_REAL = "real"
SOURCE_SYNTHETIC = "synthetic"
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}
# sidecar the sampler writes next to its images; never a data file
_SIDECAR_FILES = {"generation_meta.json"}


@dataclass(frozen=True)
class ImageRecord:
    path: str
    label: str
    source: str

    def __post_init__(self):
        if self.label not in (LABEL_DEFECTIVE, LABEL_NON_DEFECTIVE):
            raise ValueError(f"unknown label {self.label!r}")
        if self.source not in (SOURCE_REAL, SOURCE_SYNTHETIC):
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == SOURCE_SYNTHETIC and self.label != LABEL_DEFECTIVE:
            raise ValueError("synthetic records must be labeled defective in this pipeline")


@dataclass
class DatasetManifest:
    records: list[ImageRecord]

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise ValueError(f"duplicate paths in manifest: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def counts(self) -> dict[tuple[str, str], int]:
        """Tally per (label, source)."""
        return dict(Counter((r.label, r.source) for r in self.records))

    def count(self, label: str | None = None, source: str | None = None) -> int:
        return sum(
            1
            for r in self.records
            if (label is None or r.label == label) and (source is None or r.source == source)
        )

    def to_jsonl(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"path": r.path, "label": r.label, "source": r.source}) + "\n")

    @staticmethod
    def from_jsonl(path) -> "DatasetManifest":
        records = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                records.append(ImageRecord(path=d["path"], label=d["label"], source=d["source"]))
        return DatasetManifest(records)


def scan_image_folder(folder, label: str, source: str):
    """Collect decodable PNG/JPG files under `folder` (non-recursive).

    Returns (records, skips); skips is a list of (path, reason) strings for
    files that were filtered out or failed to decode.
    """
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"not a directory: {folder}")
    records, skips = [], []
    for entry in sorted(folder.iterdir()):
        if not entry.is_file() or entry.name in _SIDECAR_FILES:
            continue
        if entry.suffix.lower() not in IMAGE_EXTENSIONS:
            skips.append((str(entry), f"unsupported extension {entry.suffix!r}"))
            continue
        try:
            with Image.open(entry) as img:
                img.verify()
        except Exception as exc:  # noqa: BLE001 - any decode failure means skip
            skips.append((str(entry), f"decode failure: {exc}"))
            continue
        records.append(ImageRecord(path=str(entry), label=label, source=source))
    for path, reason in skips:
        logger.warning("skipping %s (%s)", path, reason)
    return records, skips


def write_load_report(report_path, skips) -> None:
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{path}\t{reason}" for path, reason in skips]
    report_path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_minority_folder(folder, report_path=None) -> DatasetManifest:
    """Load the real defective-class folder the generative model trains on."""
    records, skips = scan_image_folder(folder, LABEL_DEFECTIVE, SOURCE_REAL)
    if report_path is not None:
        write_load_report(report_path, skips)
    if not records:
        raise ValueError(f"no usable images in {folder}; cannot train on an empty minority class")
    return DatasetManifest(records)


def load_binary_folders(nondefective_dir, defective_dir, report_path=None) -> DatasetManifest:
    """Load the full real dataset from one folder per class."""
    nondef, skips_a = scan_image_folder(nondefective_dir, LABEL_NON_DEFECTIVE, SOURCE_REAL)
    defect, skips_b = scan_image_folder(defective_dir, LABEL_DEFECTIVE, SOURCE_REAL)
    if report_path is not None:
        write_load_report(report_path, skips_a + skips_b)
    if not nondef or not defect:
        raise ValueError(
            f"both classes need at least one image "
            f"(non_defective={len(nondef)}, defective={len(defect)})"
        )
    return DatasetManifest(nondef + defect)


def preprocess_for_ddpm(record, size: int = 128) -> torch.Tensor:
    """Decode, resize, and map to a [3, size, size] float tensor in [-1, 1].

    Each channel goes through (x/255 - 0.5)/0.5, so saturated pixels hit the
    interval endpoints exactly.
    """
    path = record.path if isinstance(record, ImageRecord) else record
    with Image.open(path) as img:
        img = img.convert("RGB").resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)
    arr = (arr / 255.0 - 0.5) / 0.5
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def build_augmented_manifest(real: DatasetManifest, synthetic_dir, report_path=None) -> DatasetManifest:
    """Merge the real manifest with generated minority images.

    Synthetic records are tagged source=synthetic; composition tallies are
    logged so the rebalancing effect is visible in run logs.
    """
    records, skips = scan_image_folder(synthetic_dir, LABEL_DEFECTIVE, SOURCE_SYNTHETIC)
    if report_path is not None:
        write_load_report(report_path, skips)
    if not records:
        logger.warning("synthetic dir %s holds no images; manifest unchanged", synthetic_dir)
        return DatasetManifest(list(real.records))
    merged = DatasetManifest(list(real.records) + records)
    n_def = merged.count(label=LABEL_DEFECTIVE)
    n_nondef = merged.count(label=LABEL_NON_DEFECTIVE)
    logger.info(
        "augmented manifest: %d non-defective / %d defective (%d synthetic), "
        "defective share %.3f, imbalance ratio %.2f",
        n_nondef, n_def, len(records), n_def / len(merged), n_nondef / max(n_def, 1),
    )
    return merged


def stratified_split(manifest: DatasetManifest, val_fraction: float, seed: int):
    """Split into (train, val) preserving per-label proportions within one sample.

    Only real records are eligible for validation; synthetic records always
    land in the training side. Deterministic for a fixed seed regardless of
    the manifest's record order.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    real = [r for r in manifest.records if r.source == SOURCE_REAL]
    synthetic = [r for r in manifest.records if r.source == SOURCE_SYNTHETIC]
    by_label = {
        label: sorted((r for r in real if r.label == label), key=lambda r: r.path)
        for label in (LABEL_NON_DEFECTIVE, LABEL_DEFECTIVE)
    }
    for label, group in by_label.items():
        if not group:
            raise ValueError(f"label {label!r} has no real records; cannot stratify")

    rng = random.Random(seed)
    train, val = [], []
    for label in (LABEL_NON_DEFECTIVE, LABEL_DEFECTIVE):
        group = list(by_label[label])
        rng.shuffle(group)
        n_val = round(val_fraction * len(group))
        val.extend(group[:n_val])
        train.extend(group[n_val:])
    train.extend(synthetic)
    return DatasetManifest(train), DatasetManifest(val)
