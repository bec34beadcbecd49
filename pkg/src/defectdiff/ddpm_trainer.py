"""Random-timestep noise-prediction training with resumable checkpoints.

A checkpoint is a directory holding weights.bin (model + optimizer state),
meta.json (schedule, denoiser, and train configs plus step accounting), and
loss_log.csv with one row per log_every_steps.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch
from torch.utils.data import DataLoader, TensorDataset

from .denoiser import DenoiserConfig, NoisePredictor, build_denoiser
from .errors import TrainingDivergedError
from .ingestion import DatasetManifest, preprocess_for_ddpm
from .schedule import NoiseSchedule, forward_sample, training_loss

logger = logging.getLogger(__name__)

WEIGHTS_FILE = "weights.bin"
META_FILE = "meta.json"
LOSS_LOG_FILE = "loss_log.csv"


@dataclass(frozen=True)
class DdpmTrainConfig:
    checkpoint_dir: str
    epochs: int = 1300
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    log_every_steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.log_every_steps < 1:
            raise ValueError(f"log_every_steps must be >= 1, got {self.log_every_steps}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "log_every_steps": self.log_every_steps,
            "seed": self.seed,
        }


def sample_timesteps(n: int, num_timesteps: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform draw of per-sample timesteps over [0, num_timesteps)."""
    return torch.randint(0, num_timesteps, (n,), generator=generator)


def save_checkpoint(ckpt_dir, model, optimizer, meta: dict, loss_rows) -> Path:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    torch.save({"model": model.state_dict(), "optimizer": optimizer.state_dict()},
               ckpt_dir / WEIGHTS_FILE)
    (ckpt_dir / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(ckpt_dir / LOSS_LOG_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "loss"])
        writer.writerows(loss_rows)
    return ckpt_dir


def load_checkpoint(ckpt_dir):
    """Returns (meta, torch payload, loss rows) for a checkpoint directory."""
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / META_FILE
    if not meta_path.is_file():
        raise FileNotFoundError(f"no checkpoint metadata at {meta_path}")
    meta = json.loads(meta_path.read_text())
    payload = torch.load(ckpt_dir / WEIGHTS_FILE, map_location="cpu", weights_only=True)
    rows = []
    log_path = ckpt_dir / LOSS_LOG_FILE
    if log_path.is_file():
        with open(log_path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append((int(row["step"]), int(row["epoch"]), float(row["loss"])))
    return meta, payload, rows


def read_loss_log(ckpt_dir):
    """Loss log rows as (step, epoch, loss) tuples."""
    _, _, rows = load_checkpoint(ckpt_dir)
    return rows


def _load_training_tensor(manifest: DatasetManifest, sample_size: int) -> torch.Tensor:
    return torch.stack([preprocess_for_ddpm(r, size=sample_size) for r in manifest.records])


def train_ddpm(
    manifest: DatasetManifest,
    sched: NoiseSchedule,
    denoiser_cfg: DenoiserConfig,
    cfg: DdpmTrainConfig,
    device: str = "cpu",
) -> Path:
    """Train a noise predictor on the minority class and checkpoint it.

    Per batch: sample timesteps uniformly, noise the images with the
    closed-form forward marginal, predict the noise, take an MSE step.
    Checkpoints at the end of every epoch; deterministic for a fixed seed
    on a fixed device.
    """
    if len(manifest) == 0:
        raise ValueError("manifest is empty; nothing to train on")
    torch.manual_seed(cfg.seed)
    model = build_denoiser(denoiser_cfg).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    return _train_loop(
        model, optimizer, manifest, sched, denoiser_cfg, cfg, device,
        start_epoch=0, start_step=0, loss_rows=[],
    )


def resume(
    checkpoint: str,
    cfg: DdpmTrainConfig,
    sched: NoiseSchedule | None = None,
    denoiser_cfg: DenoiserConfig | None = None,
    device: str = "cpu",
) -> Path:
    """Continue training a checkpoint until cfg.epochs total epochs.

    cfg.epochs is the cumulative target: resuming a 10-epoch checkpoint with
    epochs=10 is a no-op that re-saves identical weights. Explicitly passed
    schedule or denoiser configs must match the checkpoint metadata.
    """
    meta, payload, loss_rows = load_checkpoint(checkpoint)
    stored_sched = NoiseSchedule.from_metadata(meta["schedule"])
    stored_denoiser = DenoiserConfig.from_dict(meta["denoiser"])
    if sched is not None and sched.to_metadata() != meta["schedule"]:
        raise ValueError(
            f"schedule mismatch: checkpoint has {meta['schedule']}, got {sched.to_metadata()}"
        )
    if denoiser_cfg is not None and denoiser_cfg != stored_denoiser:
        raise ValueError(
            f"denoiser config mismatch: checkpoint has {stored_denoiser}, got {denoiser_cfg}"
        )

    torch.manual_seed(cfg.seed)
    model = build_denoiser(stored_denoiser).to(device)
    model.load_state_dict(payload["model"])
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    optimizer.load_state_dict(payload["optimizer"])

    done = meta["epochs_completed"]
    if done >= cfg.epochs:
        logger.info("checkpoint already at %d epochs >= target %d; re-saving", done, cfg.epochs)
        meta = dict(meta, train=cfg.to_dict())
        return save_checkpoint(cfg.checkpoint_dir, model, optimizer, meta, loss_rows)

    manifest = DatasetManifest.from_jsonl(Path(checkpoint) / "train_manifest.jsonl")
    return _train_loop(
        model, optimizer, manifest, stored_sched, stored_denoiser, cfg, device,
        start_epoch=done, start_step=meta["steps_completed"], loss_rows=loss_rows,
    )


def _train_loop(model, optimizer, manifest, sched, denoiser_cfg, cfg, device,
                start_epoch, start_step, loss_rows):
    images = _load_training_tensor(manifest, denoiser_cfg.sample_size)
    shuffler = torch.Generator().manual_seed(cfg.seed + start_epoch)
    noise_gen = torch.Generator(device=device).manual_seed(cfg.seed + start_epoch + 1)
    loader = DataLoader(TensorDataset(images), batch_size=cfg.batch_size,
                        shuffle=True, generator=shuffler, num_workers=0)

    def meta_for(epoch, step):
        return {
            "schedule": sched.to_metadata(),
            "denoiser": denoiser_cfg.to_dict(),
            "train": cfg.to_dict(),
            "epochs_completed": epoch,
            "steps_completed": step,
        }

    step = start_step
    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        for (x0,) in loader:
            x0 = x0.to(device)
            t = sample_timesteps(x0.shape[0], sched.num_timesteps, noise_gen)
            eps = torch.randn(x0.shape, generator=noise_gen, device=device)
            x_t = forward_sample(x0, t, eps, sched)
            eps_hat = model(x_t, t)
            loss = training_loss(eps_hat, eps)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss.item()} at step {step + 1} (epoch {epoch}); "
                    "lower the learning rate or inspect the input data"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            if step % cfg.log_every_steps == 0:
                loss_rows.append((step, epoch, float(loss.item())))
        save_checkpoint(cfg.checkpoint_dir, model, optimizer, meta_for(epoch + 1, step), loss_rows)
        manifest.to_jsonl(Path(cfg.checkpoint_dir) / "train_manifest.jsonl")
    return Path(cfg.checkpoint_dir)
