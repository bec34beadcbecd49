"""Ancestral reverse-diffusion sampling from a trained checkpoint.

Starts from standard normal noise and applies the full T-step reverse loop;
no stride or skip sampling. Outputs are clamped to [-1, 1], mapped to
[0, 255], rounded, and written as PNGs named gen_{seed}_{index:04d}.png.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .ddpm_trainer import WEIGHTS_FILE, load_checkpoint
from .denoiser import DenoiserConfig, build_denoiser
from .schedule import NoiseSchedule, reverse_step

META_FILE = "generation_meta.json"

# Offset multiplier keeping per-batch RNG streams disjoint across seeds.
_BATCH_STREAM_STRIDE = 1_000_003


@dataclass(frozen=True)
class GenerationRequest:
    num_images: int
    seed: int
    output_dir: str
    batch_size: int = 16

    def __post_init__(self):
        if self.num_images < 1:
            raise ValueError(f"num_images must be >= 1, got {self.num_images}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def denoise_loop(
    eps_model,
    shape: tuple,
    sched: NoiseSchedule,
    generator: torch.Generator,
    device: str = "cpu",
):
    """Run the reverse chain from pure noise; returns (x0 batch, steps taken).

    eps_model is any callable (x_t, t_batch) -> predicted noise. The loop
    executes exactly sched.num_timesteps steps; the count is returned so
    callers can assert it.
    """
    x = torch.randn(shape, generator=generator, device=device)
    steps = 0
    for t in reversed(range(sched.num_timesteps)):
        t_batch = torch.full((shape[0],), t, dtype=torch.long, device=device)
        eps_hat = eps_model(x, t_batch)
        z = torch.randn(shape, generator=generator, device=device) if t > 0 else None
        x = reverse_step(x, t, eps_hat, sched, z=z)
        steps += 1
    return x, steps


def tensor_to_pixels(x: torch.Tensor) -> np.ndarray:
    """Clamp [-1, 1], rescale to [0, 255], round; returns uint8 HWC array."""
    x = x.detach().clamp(-1.0, 1.0)
    scaled = (x + 1.0) / 2.0 * 255.0
    return torch.round(scaled).to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def generate_with_model(
    eps_model,
    sched: NoiseSchedule,
    sample_size: int,
    req: GenerationRequest,
    device: str = "cpu",
    checkpoint_sha256: str | None = None,
    channels: int = 3,
) -> list:
    """Sample req.num_images images from an arbitrary noise-prediction callable."""
    out_dir = Path(req.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = []
    index = 0
    num_batches = math.ceil(req.num_images / req.batch_size)
    for batch_index in range(num_batches):
        count = min(req.batch_size, req.num_images - index)
        g = torch.Generator(device=device)
        g.manual_seed(req.seed * _BATCH_STREAM_STRIDE + batch_index)
        x0, steps = denoise_loop(
            eps_model, (count, channels, sample_size, sample_size), sched, g, device
        )
        assert steps == sched.num_timesteps
        for i in range(count):
            path = out_dir / f"gen_{req.seed}_{index:04d}.png"
            Image.fromarray(tensor_to_pixels(x0[i])).save(path)
            paths.append(path)
            index += 1

    meta = {
        "checkpoint_sha256": checkpoint_sha256,
        "seed": req.seed,
        "num_timesteps": sched.num_timesteps,
        "count": req.num_images,
        "sample_size": sample_size,
    }
    (out_dir / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def generate(checkpoint, req: GenerationRequest, device: str = "cpu") -> list:
    """Sample synthetic minority images from a trained checkpoint directory.

    Pure given (checkpoint, seed, device): a fixed seed yields byte-identical
    files. generation_meta.json records the weights hash, seed, T, and count.
    """
    meta, payload, _ = load_checkpoint(checkpoint)
    sched = NoiseSchedule.from_metadata(meta["schedule"])
    dcfg = DenoiserConfig.from_dict(meta["denoiser"])
    model = build_denoiser(dcfg).to(device)
    model.load_state_dict(payload["model"])
    model.eval()

    weights_hash = hashlib.sha256((Path(checkpoint) / WEIGHTS_FILE).read_bytes()).hexdigest()

    with torch.no_grad():
        return generate_with_model(
            model, sched, dcfg.sample_size, req, device=device,
            checkpoint_sha256=weights_hash, channels=dcfg.in_channels,
        )


def preview_grid(paths, cols: int, out_path=None) -> Path:
    """Tile images row-major into a single montage PNG.

    Grid width is min(cols, len(paths)) tiles; unused cells in the last row
    stay black. All inputs must share the first image's size.
    """
    if not paths:
        raise ValueError("no images to tile")
    if cols < 1:
        raise ValueError(f"cols must be >= 1, got {cols}")
    images = [Image.open(p).convert("RGB") for p in paths]
    w, h = images[0].size
    for p, im in zip(paths, images):
        if im.size != (w, h):
            raise ValueError(f"image size mismatch: {p} is {im.size}, expected {(w, h)}")

    eff_cols = min(cols, len(images))
    rows = math.ceil(len(images) / eff_cols)
    canvas = Image.new("RGB", (eff_cols * w, rows * h))
    for i, im in enumerate(images):
        r, c = divmod(i, eff_cols)
        canvas.paste(im, (c * w, r * h))

    if out_path is None:
        out_path = Path(paths[0]).parent / "preview_grid.png"
    out_path = Path(out_path)
    canvas.save(out_path)
    return out_path
