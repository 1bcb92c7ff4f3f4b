"""Warp instance patch embeddings into their target masks to build ``l_c``.

For each instance the patch grid is aligned with the mask's bounding box at
latent resolution (first/last grid cells on first/last box cells), sampled
bilinearly at every covered latent cell, optionally swapped for the global
embedding, and accumulated into a (C, H', W') tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .features import PatchEmbeddingGrid, bilinear_sample
from .imaging import InstanceMask, downsample_mask, tight_box


@dataclass(frozen=True)
class RoiFeatures:
    rows: np.ndarray
    cols: np.ndarray
    features: np.ndarray  # (K, C)
    degenerate: bool = False


@dataclass(frozen=True)
class LatentControlSignal:
    tensor: np.ndarray  # (C, H', W')
    coverage: np.ndarray  # (H', W') bool
    overlap: np.ndarray  # (H', W') count of instances written per cell


def latent_mask(mask: InstanceMask, latent_dims: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape
    lh, lw = latent_dims
    if h % lh or w % lw or h // lh != w // lw:
        raise InvalidInputError(f"mask {h}x{w} incompatible with latent dims {lh}x{lw}")
    return downsample_mask(mask.mask, h // lh)


def roi_interpolate(grid: PatchEmbeddingGrid, mask: InstanceMask,
                    latent_dims: tuple[int, int]) -> RoiFeatures:
    """Bilinear samples of ``grid`` at every latent cell covered by ``mask``.

    Grid corners map onto the corners of the mask's latent bounding box. When
    the box is narrower than two cells along an axis, that axis samples the
    grid centre and all lookups snap to the nearest cell.
    """
    lm = latent_mask(mask, latent_dims)
    x0, y0, x1, y1 = tight_box(lm)
    rows, cols = np.nonzero(lm)
    gh, gw = grid.spatial.shape[:2]
    span_y, span_x = y1 - 1 - y0, x1 - 1 - x0
    degenerate = span_y < 1 or span_x < 1
    gy = (rows - y0) * (gh - 1) / span_y if span_y >= 1 else np.full(rows.shape, (gh - 1) / 2)
    gx = (cols - x0) * (gw - 1) / span_x if span_x >= 1 else np.full(cols.shape, (gw - 1) / 2)
    if degenerate:
        feats = grid.spatial[np.rint(gy).astype(int), np.rint(gx).astype(int)]
    else:
        feats = bilinear_sample(grid.spatial, gy, gx)
    return RoiFeatures(rows=rows, cols=cols, features=np.asarray(feats, dtype=np.float64),
                       degenerate=degenerate)


DROPOUT_UNITS = ("position", "instance")


def global_dropout(roi: RoiFeatures, global_: np.ndarray, rate: float,
                   rng: np.random.Generator, unit: str = "position") -> RoiFeatures:
    """Replace written positions by ``global_`` with probability ``rate``.

    ``unit="position"`` flips one coin per position; ``"instance"`` flips one
    coin for the whole instance.
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidInputError(f"dropout rate must lie in [0, 1], got {rate}")
    if unit not in DROPOUT_UNITS:
        raise InvalidInputError(f"dropout unit must be one of {DROPOUT_UNITS}, got {unit!r}")
    if rate == 0.0:
        return roi
    if unit == "instance":
        drop = np.full(len(roi.rows), rng.random() < rate)
    else:
        drop = rng.random(len(roi.rows)) < rate
    feats = roi.features.copy()
    feats[drop] = global_
    return RoiFeatures(roi.rows, roi.cols, feats, roi.degenerate)


def compose_latent_control(instances: Sequence[tuple[PatchEmbeddingGrid, InstanceMask]],
                           rate: float, rng: np.random.Generator | None,
                           latent_dims: tuple[int, int], channels: int | None = None,
                           unit: str = "position") -> LatentControlSignal:
    """Sum of per-instance warped features; exactly zero outside every mask.

    Dropout for instance ``i`` draws from a substream keyed by ``i``, so the
    result depends only on which index each instance carries.
    """
    if channels is None:
        if not instances:
            raise InvalidInputError("channels must be given for an empty instance list")
        channels = instances[0][0].channels
    lh, lw = latent_dims
    tensor = np.zeros((channels, lh, lw))
    overlap = np.zeros((lh, lw), dtype=np.int64)
    base = int(rng.integers(2**62)) if (rng is not None and rate > 0) else 0
    for i, (grid, mask) in enumerate(instances):
        if grid.channels != channels:
            raise InvalidInputError(f"instance {i} has {grid.channels} channels, expected {channels}")
        roi = roi_interpolate(grid, mask, latent_dims)
        if rate > 0:
            if rng is None:
                raise InvalidInputError("a generator is required when rate > 0")
            roi = global_dropout(roi, grid.global_, rate, np.random.default_rng([base, i]), unit)
        tensor[:, roi.rows, roi.cols] += roi.features.T
        overlap[roi.rows, roi.cols] += 1
    return LatentControlSignal(tensor=tensor, coverage=overlap > 0, overlap=overlap)
