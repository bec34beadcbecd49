"""Timestep-conditioned UNet that predicts the noise added to an image.

The topology is a standard down/up-sampling stack of residual blocks with
optional self-attention at chosen resolution levels.  Everything is sized
from DenoiserConfig so the same code runs at 128x128 production scale and
at 8x8 desk scale for CPU tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn


@dataclass(frozen=True)
class DenoiserConfig:
    """Shape contract and capacity knobs for the noise predictor.

    attention_levels indexes into block_channels (level 0 = full resolution);
    by default the two lowest-resolution levels get attention.
    """

    sample_size: int = 128
    in_channels: int = 3
    out_channels: int = 3
    block_channels: tuple[int, ...] = (64, 128, 128, 256)
    layers_per_block: int = 2
    attention_levels: frozenset[int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.in_channels != self.out_channels:
            raise ValueError(
                f"in_channels {self.in_channels} must equal out_channels {self.out_channels}: "
                "the model predicts noise of the input's shape"
            )
        if len(self.block_channels) == 0 or self.layers_per_block < 1:
            raise ValueError("need at least one level and one layer per block")
        if any(c < 1 for c in self.block_channels):
            raise ValueError(f"block_channels must be positive, got {self.block_channels}")
        levels = len(self.block_channels)
        factor = 2 ** (levels - 1)
        if self.sample_size < factor or self.sample_size % factor != 0:
            raise ValueError(
                f"sample_size {self.sample_size} must be divisible by 2^(levels-1) = {factor}"
            )
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if self.attention_levels is None:
            default = {levels - 1} if levels == 1 else {levels - 2, levels - 1}
            object.__setattr__(self, "attention_levels", frozenset(default))
        else:
            object.__setattr__(self, "attention_levels", frozenset(int(i) for i in self.attention_levels))
        if not set(self.attention_levels) <= set(range(levels)):
            raise ValueError(f"attention_levels {sorted(self.attention_levels)} outside [0, {levels})")

    def to_dict(self) -> dict:
        return {
            "sample_size": self.sample_size,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "block_channels": list(self.block_channels),
            "layers_per_block": self.layers_per_block,
            "attention_levels": sorted(self.attention_levels),
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(
            sample_size=d["sample_size"],
            in_channels=d["in_channels"],
            out_channels=d["out_channels"],
            block_channels=tuple(d["block_channels"]),
            layers_per_block=d["layers_per_block"],
            attention_levels=frozenset(d["attention_levels"]),
        )


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class TimestepEmbedding(nn.Module):
    """Sinusoidal position encoding of an integer timestep; values in [-1, 1]."""

    def __init__(self, dim: int):
        super().__init__()
        if dim < 2 or dim % 2 != 0:
            raise ValueError(f"embedding dimension must be even and >= 2, got {dim}")
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half
        )
        args = t.to(torch.float64)[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        return emb.to(torch.get_default_dtype() if not t.is_floating_point() else t.dtype)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_channels)
        self.norm2 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()
        )

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)  # [b, hw, hw]
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class _Level(nn.Module):
    """One resolution level: residual blocks with optional attention after each."""

    def __init__(self, blocks, attns):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.attns = nn.ModuleList(attns)


class NoisePredictor(nn.Module):
    """UNet mapping (noisy image, timestep) -> predicted noise of identical shape."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        chans = config.block_channels
        temb_dim = chans[0] * 4
        self.time_encoding = TimestepEmbedding(chans[0])
        self.time_mlp = nn.Sequential(
            nn.Linear(chans[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.conv_in = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)

        def maybe_attn(level, ch):
            return SelfAttention2d(ch) if level in config.attention_levels else nn.Identity()

        self.down_levels = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        ch = chans[0]
        for level, width in enumerate(chans):
            blocks, attns = [], []
            for _ in range(config.layers_per_block):
                blocks.append(ResidualBlock(ch, width, temb_dim))
                attns.append(maybe_attn(level, width))
                ch = width
            self.down_levels.append(_Level(blocks, attns))
            if level < len(chans) - 1:
                self.downsamplers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid_block1 = ResidualBlock(ch, ch, temb_dim)
        self.mid_attn = SelfAttention2d(ch)
        self.mid_block2 = ResidualBlock(ch, ch, temb_dim)

        self.up_levels = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        skip_widths = self._skip_widths()
        for level in reversed(range(len(chans))):
            width = chans[level]
            blocks, attns = [], []
            for _ in range(config.layers_per_block + 1):
                blocks.append(ResidualBlock(ch + skip_widths.pop(), width, temb_dim))
                attns.append(maybe_attn(level, width))
                ch = width
            self.up_levels.append(_Level(blocks, attns))
            if level > 0:
                self.upsamplers.append(
                    nn.Sequential(
                        nn.Upsample(scale_factor=2, mode="nearest"),
                        nn.Conv2d(ch, ch, 3, padding=1),
                    )
                )

        self.out_norm = _norm(ch)
        self.out_conv = nn.Conv2d(ch, config.out_channels, 3, padding=1)

    def _skip_widths(self) -> list[int]:
        """Channel widths of the saved down-path activations, in push order."""
        chans = self.config.block_channels
        widths = [chans[0]]
        for level, width in enumerate(chans):
            widths.extend([width] * self.config.layers_per_block)
            if level < len(chans) - 1:
                widths.append(width)
        return widths

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected input [B, {cfg.in_channels}, {cfg.sample_size}, {cfg.sample_size}], "
                f"got {tuple(x.shape)}"
            )
        if x.shape[2] != cfg.sample_size or x.shape[3] != cfg.sample_size:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} does not match sample_size {cfg.sample_size}"
            )
        t = torch.as_tensor(t, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        if t.shape != (x.shape[0],):
            raise ValueError(f"t must have shape [{x.shape[0]}], got {tuple(t.shape)}")
        if bool((t < 0).any()):
            raise ValueError("negative timestep")

        temb = self.time_mlp(self.time_encoding(t).to(x.dtype))
        h = self.conv_in(x)
        skips = [h]
        for level, stage in enumerate(self.down_levels):
            for block, attn in zip(stage.blocks, stage.attns):
                h = attn(block(h, temb))
                skips.append(h)
            if level < len(self.downsamplers):
                h = self.downsamplers[level](h)
                skips.append(h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, temb)), temb)

        for i, stage in enumerate(self.up_levels):
            for block, attn in zip(stage.blocks, stage.attns):
                h = attn(block(torch.cat([h, skips.pop()], dim=1), temb))
            if i < len(self.upsamplers):
                h = self.upsamplers[i](h)

        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


def build_denoiser(config: DenoiserConfig, seed: int | None = None) -> NoisePredictor:
    """Construct a noise predictor, optionally with seeded initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return NoisePredictor(config)


def predict_noise(model: NoisePredictor, x_t: torch.Tensor, t, num_timesteps: int | None = None) -> torch.Tensor:
    """Run the denoiser under its shape contract.

    Validates the timestep range when num_timesteps is given (the model itself
    is schedule-agnostic).
    """
    t = torch.as_tensor(t)
    if num_timesteps is not None and t.numel() > 0 and bool((t >= num_timesteps).any()):
        raise ValueError(f"timestep out of range [0, {num_timesteps})")
    return model(x_t, t)


def count_parameters(model: nn.Module) -> int:
    """Exact count of trainable parameters."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
