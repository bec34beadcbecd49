"""Single structured JSON config driving every pipeline command.

The file mirrors the module configs it feeds: schedule parameters, denoiser
layout, generator training, sampling, per-backbone classifier settings, the
split, and the projection. A canonical-JSON sha256 of the whole config is
embedded in every artifact so outputs can be traced to the exact settings
that produced them.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .classifier import Backbone, ClassifierTrainConfig
from .denoiser import DenoiserConfig
from .feature_analysis import TsneConfig

# Overrides the torch hub directory used for pretrained backbone weights.
WEIGHTS_DIR_ENV = "DEFECTDIFF_WEIGHTS_DIR"


@dataclass(frozen=True)
class ScheduleParams:
    num_timesteps: int = 14000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class DdpmParams:
    epochs: int = 1300
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    log_every_steps: int = 50


@dataclass(frozen=True)
class GenerationParams:
    num_images: int = 60
    batch_size: int = 16


@dataclass(frozen=True)
class SplitParams:
    val_fraction: float = 0.27

    def __post_init__(self):
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError(f"val_fraction must lie in (0,1), got {self.val_fraction}")


@dataclass(frozen=True)
class TsneParams:
    perplexity: float = 30.0
    iterations: int = 2000
    seed: int = 42
    backbone: str = "resnet50v2"

    def to_tsne_config(self) -> TsneConfig:
        return TsneConfig(perplexity=self.perplexity, iterations=self.iterations,
                          seed=self.seed)


def _default_classifiers() -> dict:
    return {kind.value: ClassifierTrainConfig() for kind in Backbone}


@dataclass(frozen=True)
class PipelineConfig:
    data_root: str
    output_root: str
    seed: int = 0
    pretrained: bool = True
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    ddpm: DdpmParams = field(default_factory=DdpmParams)
    generation: GenerationParams = field(default_factory=GenerationParams)
    split: SplitParams = field(default_factory=SplitParams)
    classifiers: dict = field(default_factory=_default_classifiers)
    tsne: TsneParams = field(default_factory=TsneParams)

    def __post_init__(self):
        if not self.classifiers:
            raise ValueError("at least one classifier backbone must be configured")
        for name, cfg in self.classifiers.items():
            Backbone(name)  # raises on unknown backbone names
            if not isinstance(cfg, ClassifierTrainConfig):
                raise ValueError(f"classifier entry {name!r} is not a train config")
        Backbone(self.tsne.backbone)

    # ------------------------------------------------------------- paths

    @property
    def nondef_dir(self) -> Path:
        return Path(self.data_root) / "non_defective"

    @property
    def defective_dir(self) -> Path:
        return Path(self.data_root) / "defective"

    @property
    def ddpm_dir(self) -> Path:
        return Path(self.output_root) / "ddpm"

    @property
    def synthetic_dir(self) -> Path:
        return Path(self.output_root) / "synthetic"

    @property
    def manifests_dir(self) -> Path:
        return Path(self.output_root) / "manifests"

    @property
    def reports_dir(self) -> Path:
        return Path(self.output_root) / "reports"

    @property
    def tsne_dir(self) -> Path:
        return Path(self.output_root) / "tsne"

    def classifier_dir(self, arm: str, backbone: str) -> Path:
        return Path(self.output_root) / "classifiers" / f"{arm}_{backbone}"

    def validate_paths(self) -> None:
        """Input paths must resolve before any work starts."""
        for p in (Path(self.data_root), self.nondef_dir, self.defective_dir):
            if not p.is_dir():
                raise FileNotFoundError(f"required data directory missing: {p}")

    # ------------------------------------------------------------ serde

    def to_dict(self) -> dict:
        return {
            "data_root": self.data_root,
            "output_root": self.output_root,
            "seed": self.seed,
            "pretrained": self.pretrained,
            "schedule": {
                "num_timesteps": self.schedule.num_timesteps,
                "beta_start": self.schedule.beta_start,
                "beta_end": self.schedule.beta_end,
            },
            "denoiser": self.denoiser.to_dict(),
            "ddpm": {
                "epochs": self.ddpm.epochs,
                "batch_size": self.ddpm.batch_size,
                "learning_rate": self.ddpm.learning_rate,
                "weight_decay": self.ddpm.weight_decay,
                "log_every_steps": self.ddpm.log_every_steps,
            },
            "generation": {
                "num_images": self.generation.num_images,
                "batch_size": self.generation.batch_size,
            },
            "split": {"val_fraction": self.split.val_fraction},
            "classifiers": {
                name: cfg.to_dict() for name, cfg in sorted(self.classifiers.items())
            },
            "tsne": {
                "perplexity": self.tsne.perplexity,
                "iterations": self.tsne.iterations,
                "seed": self.tsne.seed,
                "backbone": self.tsne.backbone,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {
            "data_root", "output_root", "seed", "pretrained", "schedule",
            "denoiser", "ddpm", "generation", "split", "classifiers", "tsne",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "data_root" not in d or "output_root" not in d:
            raise ValueError("config must define data_root and output_root")
        kwargs = {
            "data_root": d["data_root"],
            "output_root": d["output_root"],
            "seed": d.get("seed", 0),
            "pretrained": d.get("pretrained", True),
        }
        if "schedule" in d:
            kwargs["schedule"] = ScheduleParams(**d["schedule"])
        if "denoiser" in d:
            kwargs["denoiser"] = DenoiserConfig.from_dict(d["denoiser"])
        if "ddpm" in d:
            kwargs["ddpm"] = DdpmParams(**d["ddpm"])
        if "generation" in d:
            kwargs["generation"] = GenerationParams(**d["generation"])
        if "split" in d:
            kwargs["split"] = SplitParams(**d["split"])
        if "classifiers" in d:
            kwargs["classifiers"] = {
                name: ClassifierTrainConfig.from_dict(sub)
                for name, sub in d["classifiers"].items()
            }
        if "tsne" in d:
            kwargs["tsne"] = TsneParams(**d["tsne"])
        return cls(**kwargs)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        return replace(self, **kwargs)


def resolve_weights_dir() -> None:
    """Honor the weight-cache env var by pointing torch.hub at it."""
    override = os.environ.get(WEIGHTS_DIR_ENV)
    if override:
        import torch

        torch.hub.set_dir(override)


def write_json_atomic(path, obj) -> Path:
    """Serialize with sorted keys; rename into place so partials never land."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path
