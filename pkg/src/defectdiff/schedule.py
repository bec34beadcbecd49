"""Closed-form diffusion math: beta schedules, forward noising, reverse updates.

Timesteps are 0-based: t ranges over [0, T), betas[t] is the noise variance
added at step t, and t = 0 is the final (deterministic) reverse step.
All schedule arithmetic is kept in float64; values are cast to the input
tensor's dtype only at the point of use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/alpha-bar sequences for a diffusion chain.

    alphas[t] = 1 - betas[t], alpha_bars[t] = prod_{s<=t} alphas[s].
    Immutable after construction; safe to share across workers.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_timesteps(self) -> int:
        return len(self.betas)

    @property
    def beta_start(self) -> float:
        return float(self.betas[0])

    @property
    def beta_end(self) -> float:
        return float(self.betas[-1])

    def to_metadata(self) -> dict:
        """Serializable parameters, embedded in checkpoint metadata."""
        return {
            "num_timesteps": self.num_timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "schedule_kind": "linear",
        }

    @staticmethod
    def from_metadata(meta: dict) -> "NoiseSchedule":
        if meta.get("schedule_kind", "linear") != "linear":
            raise ValueError(f"unsupported schedule_kind {meta.get('schedule_kind')!r}")
        return make_linear_schedule(meta["num_timesteps"], meta["beta_start"], meta["beta_end"])


@dataclass(frozen=True)
class ReverseStepParams:
    """Coefficients of one reverse update x_{t-1} = c_x*(x_t - c_eps*eps_hat) + sigma*z."""

    mean_coeff_x: float
    mean_coeff_eps: float
    sigma: float

    @staticmethod
    def for_timestep(sched: NoiseSchedule, t: int) -> "ReverseStepParams":
        _check_timestep(t, sched.num_timesteps)
        beta = float(sched.betas[t])
        alpha = float(sched.alphas[t])
        alpha_bar = float(sched.alpha_bars[t])
        return ReverseStepParams(
            mean_coeff_x=1.0 / math.sqrt(alpha),
            mean_coeff_eps=beta / math.sqrt(1.0 - alpha_bar),
            # final step is deterministic
            sigma=math.sqrt(beta) if t > 0 else 0.0,
        )


def make_linear_schedule(num_timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a linear beta schedule from beta_start to beta_end inclusive.

    For num_timesteps == 1 the schedule degenerates to [beta_start].
    """
    if not isinstance(num_timesteps, (int, np.integer)) or num_timesteps < 1:
        raise ValueError(f"num_timesteps must be a positive integer, got {num_timesteps!r}")
    if not (0.0 < beta_start < 1.0) or not (0.0 < beta_end < 1.0):
        raise ValueError(f"betas must lie in (0, 1), got start={beta_start}, end={beta_end}")
    if beta_start > beta_end:
        raise ValueError(f"beta_start {beta_start} exceeds beta_end {beta_end}")

    betas = np.linspace(beta_start, beta_end, num_timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.flags.writeable = False
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_sample(x0, t, eps, sched: NoiseSchedule):
    """Noise a clean sample to timestep t in one shot.

    Returns sqrt(alpha_bar_t)*x0 + sqrt(1 - alpha_bar_t)*eps, the marginal of
    composing the stepwise noising kernel t+1 times.  `t` may be a single
    index or a length-B sequence of per-sample indices (x0 batched on dim 0).
    """
    _check_same_shape(x0, eps, "x0", "eps")
    if _is_scalar_index(t):
        _check_timestep(int(t), sched.num_timesteps)
        alpha_bar = float(sched.alpha_bars[int(t)])
        return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * eps

    t_idx = np.asarray(t)
    if t_idx.ndim != 1 or t_idx.shape[0] != x0.shape[0]:
        raise ValueError(f"batched t must be 1-D of length {x0.shape[0]}, got shape {t_idx.shape}")
    if t_idx.min() < 0 or t_idx.max() >= sched.num_timesteps:
        raise ValueError(f"timesteps out of range [0, {sched.num_timesteps})")
    alpha_bar = sched.alpha_bars[t_idx]
    signal = _broadcast(np.sqrt(alpha_bar), x0)
    noise = _broadcast(np.sqrt(1.0 - alpha_bar), x0)
    return signal * x0 + noise * eps


def reverse_step(x_t, t, eps_hat, sched: NoiseSchedule, z=None):
    """One ancestral denoising update from x_t to x_{t-1}.

    z is the standard-normal draw for the stochastic part; required for t > 0
    and ignored at t = 0, where the update is deterministic.
    """
    _check_same_shape(x_t, eps_hat, "x_t", "eps_hat")
    params = ReverseStepParams.for_timestep(sched, t)
    mean = params.mean_coeff_x * (x_t - params.mean_coeff_eps * eps_hat)
    if t == 0:
        return mean
    if z is None:
        raise ValueError(f"z is required for t={t} > 0")
    _check_same_shape(x_t, z, "x_t", "z")
    return mean + params.sigma * z


def training_loss(eps_hat, eps):
    """Mean squared error between predicted and actual noise."""
    if torch.is_tensor(eps_hat) or torch.is_tensor(eps):
        if eps_hat.shape != eps.shape:
            raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
        diff = eps_hat - eps
        return (diff * diff).mean()
    a = np.asarray(eps_hat, dtype=np.float64)
    b = np.asarray(eps, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _is_scalar_index(t) -> bool:
    if isinstance(t, (int, np.integer)):
        return True
    if torch.is_tensor(t) and t.ndim == 0:
        return True
    return isinstance(t, np.ndarray) and t.ndim == 0


def _check_timestep(t: int, num_timesteps: int) -> None:
    if not 0 <= int(t) < num_timesteps:
        raise ValueError(f"timestep {t} out of range [0, {num_timesteps})")


def _check_same_shape(a, b, a_name: str, b_name: str) -> None:
    shape_a = tuple(getattr(a, "shape", ()))
    shape_b = tuple(getattr(b, "shape", ()))
    if shape_a != shape_b:
        raise ValueError(f"{a_name} shape {shape_a} does not match {b_name} shape {shape_b}")


def _broadcast(values: np.ndarray, like):
    """Reshape per-sample float64 coefficients to [B, 1, ...] matching `like`."""
    shape = (values.shape[0],) + (1,) * (like.ndim - 1)
    values = values.reshape(shape)
    if torch.is_tensor(like):
        return torch.as_tensor(values, dtype=like.dtype, device=like.device)
    return values
