"""Procedural desk-scale image corpora for tests, demos, and smoke runs.

Real production imagery stays outside the repository; these generators
fabricate small PNG datasets whose structure is known by construction:
non-defective frames are dim textured plates, defective frames add a bright
streak, so the classes are separable by design and a defect generator has a
concrete motif to learn.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _texture(rng: np.random.Generator, size: int, base: float) -> np.ndarray:
    """Dim plate texture: base gray plus mild pixel noise, HWC float in [0,1]."""
    noise = rng.normal(0.0, 0.04, size=(size, size, 1))
    plate = np.clip(base + noise, 0.0, 1.0)
    return np.repeat(plate, 3, axis=2)


def _add_streak(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bright diagonal defect streak with randomized offset and thickness."""
    size = img.shape[0]
    out = img.copy()
    offset = int(rng.integers(-size // 4, size // 4 + 1))
    thickness = max(1, size // 8)
    for i in range(size):
        j = i + offset
        lo, hi = max(j, 0), min(j + thickness, size)
        if lo < hi:
            out[i, lo:hi, :] = np.clip(out[i, lo:hi, :] + 0.55, 0.0, 1.0)
    return out


def _save(img: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def make_defect_folder(out_dir, n: int = 16, size: int = 8, seed: int = 0) -> Path:
    """Defective-only folder for generator training."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        img = _add_streak(_texture(rng, size, base=0.3), rng)
        _save(img, out_dir / f"defect_{i:03d}.png")
    return out_dir


def make_desk_config(data_root, output_root) -> dict:
    """Pipeline settings sized to finish on a CPU in seconds.

    Same shape as the production config: tiny 8x8 generator over a 50-step
    schedule, a handful of synthetic images, short head training for all
    three backbones, and a projection with perplexity scaled to the corpus.
    """
    return {
        "data_root": str(data_root),
        "output_root": str(output_root),
        "seed": 0,
        "pretrained": False,
        "schedule": {"num_timesteps": 50, "beta_start": 1e-4, "beta_end": 0.02},
        "denoiser": {
            "sample_size": 8,
            "in_channels": 3,
            "out_channels": 3,
            "block_channels": [8, 16],
            "layers_per_block": 1,
            "attention_levels": [],
        },
        "ddpm": {
            "epochs": 6,
            "batch_size": 4,
            "learning_rate": 2e-3,
            "weight_decay": 0.01,
            "log_every_steps": 1,
        },
        "generation": {"num_images": 12, "batch_size": 8},
        "split": {"val_fraction": 0.25},
        "classifiers": {
            "resnet50v2": {"learning_rate": 2e-3, "batch_size": 8,
                           "max_epochs": 5, "image_size": 32},
            "efficientnetb0": {"learning_rate": 1e-3, "batch_size": 8,
                               "max_epochs": 2, "image_size": 32},
            "mobilenetv2": {"learning_rate": 1e-3, "batch_size": 8,
                            "max_epochs": 2, "image_size": 32},
        },
        "tsne": {"perplexity": 10.0, "iterations": 1000, "seed": 42,
                 "backbone": "resnet50v2"},
    }


def make_binary_corpus(out_dir, n_nondef: int = 40, n_def: int = 12,
                       size: int = 32, seed: int = 0):
    """Imbalanced two-class corpus; returns (nondef_dir, defective_dir).

    Classes differ by a bright streak (and a brighter base), so any
    reasonable feature extractor separates them.
    """
    out_dir = Path(out_dir)
    nondef_dir = out_dir / "non_defective"
    def_dir = out_dir / "defective"
    nondef_dir.mkdir(parents=True, exist_ok=True)
    def_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_nondef):
        _save(_texture(rng, size, base=0.25), nondef_dir / f"ok_{i:03d}.png")
    for i in range(n_def):
        img = _add_streak(_texture(rng, size, base=0.55), rng)
        _save(img, def_dir / f"bad_{i:03d}.png")
    return nondef_dir, def_dir
