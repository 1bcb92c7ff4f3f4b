"""Instance patch embeddings and dense diffusion features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .diffusion.schedule import add_noise
from .errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class PatchEmbeddingGrid:
    """Spatial embedding (Gh, Gw, C), its pooled global vector (C,), and the covered box."""

    spatial: np.ndarray
    global_: np.ndarray
    source_box: tuple[int, int, int, int]

    def __post_init__(self):
        if self.spatial.ndim != 3 or min(self.spatial.shape[:2]) < 2:
            raise InvalidInputError(f"patch grid must be at least 2x2xC, got {self.spatial.shape}")
        if self.global_.shape != (self.spatial.shape[2],):
            raise InvalidInputError("global embedding width differs from the spatial channels")

    @property
    def channels(self) -> int:
        return self.spatial.shape[2]


@dataclass(frozen=True)
class FeatureMap:
    """Dense (h, w, f) features; ``source_size`` is the pixel size they describe."""

    features: np.ndarray
    source_size: tuple[int, int] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[:2]


class PatchEncoder(nn.Module):
    """Three non-overlapping conv blocks (total stride ``patch_stride``) and a global head.

    Kernel size equals stride everywhere, so each output vector depends on
    exactly one input patch; the global embedding is a learned projection of
    the mean patch vector. The module is frozen during diffusion training.
    """

    def __init__(self, channels: int = 64, stride: int = 8):
        super().__init__()
        if stride != 8:
            raise ConfigError("the patch encoder is built for stride 8")
        self.stride = stride
        self.blocks = nn.Sequential(
            nn.Conv2d(3, channels // 2, 2, stride=2), nn.GELU(),
            nn.Conv2d(channels // 2, channels, 2, stride=2), nn.GELU(),
            nn.Conv2d(channels, channels, 2, stride=2),
        )
        self.project = nn.Linear(channels, channels)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        spatial = self.blocks(x * 2.0 - 1.0)
        return spatial, self.project(spatial.mean(dim=(2, 3)))

    def project_vector(self, v: torch.Tensor) -> torch.Tensor:
        return self.project(v)


@torch.no_grad()
def encode_instance(encoder: PatchEncoder, image: np.ndarray,
                    box: tuple[int, int, int, int] | None = None) -> PatchEmbeddingGrid:
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if min(h, w) < 2 * encoder.stride:
        raise InvalidInputError(f"image {h}x{w} smaller than two patches of {encoder.stride}")
    param = next(encoder.parameters())
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].to(param.dtype)
    spatial, global_ = encoder(x)
    return PatchEmbeddingGrid(
        spatial=spatial[0].permute(1, 2, 0).double().numpy(),
        global_=global_[0].double().numpy(),
        source_box=box if box is not None else (0, 0, w, h),
    )


def bilinear_sample(features: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Vectorized bilinear lookup of an (h, w, f) array at float coordinates."""
    h, w = features.shape[:2]
    y0 = np.clip(np.floor(y).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(x).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (y - y0)[..., None]
    fx = (x - x0)[..., None]
    top = features[y0, x0] * (1 - fx) + features[y0, x1] * fx
    bottom = features[y1, x0] * (1 - fx) + features[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def sample_feature(fmap: FeatureMap | np.ndarray, p: tuple[float, float]) -> np.ndarray:
    """Bilinear feature at continuous position ``p = (row, col)``."""
    feats = fmap.features if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    h, w = feats.shape[:2]
    y, x = float(p[0]), float(p[1])
    if not (0.0 <= y <= h - 1 and 0.0 <= x <= w - 1):
        raise InvalidInputError(f"position {p} outside [0, {h - 1}] x [0, {w - 1}]")
    return bilinear_sample(feats, np.array(y), np.array(x))


@torch.no_grad()
def extract_dense_features(model, image: np.ndarray | torch.Tensor, t: int | None = None,
                           layer: str | None = None, seed: int | None = None,
                           noise: torch.Tensor | None = None) -> FeatureMap:
    """Noise the image latent to level ``t``, run the denoiser once, return a decoder tap.

    ``model`` is a :class:`~sketchcolor.model.ColorizationModel`. The tapped
    activation is bilinearly upsampled to latent resolution. ``noise``
    overrides the seeded draw.
    """
    cfg = model.cfg
    layer = layer or cfg.feature_tap
    if layer not in model.unet.tap_ids:
        raise ConfigError(f"unknown feature tap {layer!r}; known: {model.unet.tap_ids}")
    t = int(round(cfg.feature_t_frac * model.schedule.T)) if t is None else int(t)
    if not 0 <= t < model.schedule.T:
        raise InvalidInputError(f"timestep {t} outside [0, {model.schedule.T})")
    x = image if isinstance(image, torch.Tensor) else model.image_tensor(image)
    z = model.autoencoder.encode(x)
    if noise is None:
        gen = torch.Generator().manual_seed(cfg.feature_seed if seed is None else seed)
        noise = torch.randn(z.shape, generator=gen, dtype=torch.float32).to(z.dtype)
    z_t = add_noise(z, noise, torch.tensor([t] * z.shape[0]), model.schedule)
    taps: dict[str, torch.Tensor] = {}
    model.unet(z_t, torch.tensor([t] * z.shape[0]), taps=taps)
    feat = F.interpolate(taps[layer], size=z.shape[-2:], mode="bilinear", align_corners=False)
    return FeatureMap(features=feat[0].permute(1, 2, 0).double().numpy(),
                      source_size=tuple(x.shape[-2:]))
