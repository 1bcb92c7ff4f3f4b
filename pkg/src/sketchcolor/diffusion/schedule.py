"""Noise schedules and the forward (noising) process."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import InvalidInputError


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alphas[t]`` for t in [0, T)."""

    alphas: np.ndarray
    layout: str

    @property
    def T(self) -> int:
        return len(self.alphas)

    def alpha(self, t) -> torch.Tensor:
        table = torch.as_tensor(self.alphas, dtype=torch.float64)
        return table[torch.as_tensor(t, dtype=torch.long)]


def make_schedule(timesteps: int = 1000, layout: str = "linear",
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if timesteps < 1:
        raise InvalidInputError("timesteps must be >= 1")
    if layout == "linear":
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        alphas = np.cumprod(1.0 - betas)
    elif layout == "cosine":
        s = 0.008
        steps = np.arange(timesteps + 1, dtype=np.float64) / timesteps
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
        alphas = np.cumprod(1.0 - betas)
    else:
        raise InvalidInputError(f"unknown schedule layout {layout!r}")
    return NoiseSchedule(alphas=alphas, layout=layout)


def add_noise(z: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(a_t) * z + sqrt(1 - a_t) * eps`` with ``a_t`` broadcast per batch item."""
    if z.shape != eps.shape:
        raise InvalidInputError(f"shape mismatch {tuple(z.shape)} vs {tuple(eps.shape)}")
    a = schedule.alpha(t).to(z.dtype)
    a = a.reshape(-1, *([1] * (z.dim() - 1))) if a.dim() else a
    return a.sqrt() * z + (1.0 - a).sqrt() * eps


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule,
               clamp: float | None = None) -> torch.Tensor:
    a = schedule.alpha(t).to(z_t.dtype)
    a = a.reshape(-1, *([1] * (z_t.dim() - 1))) if a.dim() else a
    x0 = (z_t - (1.0 - a).sqrt() * eps_hat) / a.sqrt()
    if clamp is not None:
        x0 = x0.clamp(-clamp, clamp)
    return x0
