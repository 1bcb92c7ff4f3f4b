"""Training objectives: edge-weighted denoising, perceptual and hint terms."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import LossConfig
from .errors import InvalidInputError
from .matching import ColorHints

log = logging.getLogger(__name__)


class PerceptualFeatureStack(nn.Module):
    """Fixed random conv layers; each layer's activation is one tap.

    SiLU keeps the taps smooth so finite-difference checks are meaningful.
    Parameters are frozen at construction.
    """

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (8, 16, 32), seed: int = 7):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = in_channels
        for c in channels:
            conv = nn.Conv2d(prev, c, 3, stride=2, padding=1)
            with torch.no_grad():
                bound = (6.0 / (prev * 9 + c * 9)) ** 0.5
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
            layers.append(conv)
            prev = c
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def __len__(self):
        return len(self.layers)

    def forward(self, x) -> list[torch.Tensor]:
        taps = []
        for conv in self.layers:
            x = F.silu(conv(x))
            taps.append(x)
        return taps


class IdentityStack(nn.Module):
    """A single tap that returns its input unchanged."""

    def __len__(self):
        return 1

    def forward(self, x):
        return [x]


def ldm_loss(eps: torch.Tensor, eps_hat: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of ``w * (eps - eps_hat)**2``; ``weights`` is (H', W') or (B, H', W')."""
    if eps.shape != eps_hat.shape:
        raise InvalidInputError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    sq = (eps - eps_hat) ** 2
    if weights is None:
        return sq.mean()
    if weights.shape[-2:] != eps.shape[-2:]:
        raise InvalidInputError(f"weight map {tuple(weights.shape)} does not match {tuple(eps.shape)}")
    w = weights.to(sq.dtype)
    if w.dim() == 3 and sq.dim() == 4:
        w = w[:, None]
    return (w * sq).mean()


def perceptual_loss(z: torch.Tensor, z_hat: torch.Tensor, stack: nn.Module) -> torch.Tensor:
    """Average over taps of the per-tap mean squared feature difference."""
    if z.shape != z_hat.shape:
        raise InvalidInputError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    fa, fb = stack(z), stack(z_hat)
    return sum(F.mse_loss(a, b, reduction="mean") for a, b in zip(fa, fb)) / len(fa)


def hint_consistency_loss(decoded: torch.Tensor, hints: ColorHints | None) -> torch.Tensor:
    """MSE between ``decoded`` (3, h, w) or (1, 3, h, w) and hint colors at hint positions."""
    img = decoded[0] if decoded.dim() == 4 else decoded
    if hints is None or len(hints.rows) == 0:
        log.warning("empty hint map; hint loss is 0")
        return img.sum() * 0.0
    if tuple(img.shape[-2:]) != tuple(hints.shape):
        raise InvalidInputError(f"decoded grid {tuple(img.shape[-2:])} != hint grid {hints.shape}")
    rows = torch.as_tensor(hints.rows, dtype=torch.long)
    cols = torch.as_tensor(hints.cols, dtype=torch.long)
    got = img[:, rows, cols].T
    want = torch.as_tensor(hints.colors, dtype=img.dtype)
    return ((got - want) ** 2).mean()


@dataclass
class LossBreakdown:
    total: float
    ldm: float
    perceptual: float
    hint: float

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total, "ldm": self.ldm, "perceptual": self.perceptual, "hint": self.hint}


def total_loss(ldm: torch.Tensor, perceptual: torch.Tensor | None, hint: torch.Tensor | None,
               cfg: LossConfig) -> tuple[torch.Tensor, LossBreakdown]:
    """``ldm + lambda_perceptual * perceptual + lambda_hint * hint``.

    The edge weighting is already inside ``ldm``; the breakdown records the
    unweighted terms.
    """
    total = ldm
    if perceptual is not None and cfg.lambda_perceptual:
        total = total + cfg.lambda_perceptual * perceptual
    if hint is not None and cfg.lambda_hint:
        total = total + cfg.lambda_hint * hint
    breakdown = LossBreakdown(
        total=float(total.detach()),
        ldm=float(ldm.detach()),
        perceptual=float(perceptual.detach()) if perceptual is not None else 0.0,
        hint=float(hint.detach()) if hint is not None else 0.0,
    )
    return total, breakdown
