"""Raster containers, line-art extraction, masks and edge weight maps.

Images are plain float64 numpy arrays: RGB as (H, W, 3) and sketches as
(H, W), all values in [0, 1]. Sketches use 0 for ink and 1 for paper.

Line art is a thresholded Sobel magnitude of Rec.601 luminance::

    Gx = [[-1, 0, 1],      Gy = Gx.T
          [-2, 0, 2],
          [-1, 0, 1]] / 4

    magnitude = sqrt(Gx*L ** 2 + Gy*L ** 2)

computed as a correlation with edge-replicated borders, so a unit step in
luminance yields magnitude 1 on the two columns adjacent to the step.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InvalidInputError

LUMA = np.array([0.299, 0.587, 0.114])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 4.0
SOBEL_Y = SOBEL_X.T.copy()
FOUR_NEIGHBORS = ndimage.generate_binary_structure(2, 1)


def check_rgb(image: np.ndarray, multiple: int = 1) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected an (H, W, 3) image, got shape {image.shape}")
    _check_dims(image.shape[:2], multiple)
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise InvalidInputError("pixel values must lie in [0, 1]")
    return image


def check_sketch(sketch: np.ndarray, multiple: int = 1) -> np.ndarray:
    sketch = np.asarray(sketch, dtype=np.float64)
    if sketch.ndim != 2:
        raise InvalidInputError(f"expected an (H, W) sketch, got shape {sketch.shape}")
    _check_dims(sketch.shape, multiple)
    return sketch


def _check_dims(hw, multiple):
    h, w = hw
    if h < 8 or w < 8:
        raise InvalidInputError(f"image must be at least 8x8, got {h}x{w}")
    if h % multiple or w % multiple:
        raise InvalidInputError(f"image dims {h}x{w} not divisible by {multiple}")


@dataclass(frozen=True)
class InstanceMask:
    """Binary placement mask plus its tight box ``(x0, y0, x1, y1)``, exclusive ends."""

    mask: np.ndarray
    box: tuple[int, int, int, int]

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", mask)
        if not mask.any():
            raise InvalidInputError("instance mask has no true pixel")
        if tuple(self.box) != tight_box(mask):
            raise InvalidInputError(f"box {self.box} is not the tight box {tight_box(mask)}")
        object.__setattr__(self, "box", tuple(int(v) for v in self.box))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "InstanceMask":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise InvalidInputError("instance mask has no true pixel")
        return cls(mask, tight_box(mask))

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class InstanceRef:
    """A colored reference crop and the mask placing it in the target frame."""

    image: np.ndarray
    mask: InstanceMask
    crop_mask: np.ndarray | None = None


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise InvalidInputError("empty mask has no bounding box")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def luminance(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) @ LUMA


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    gray = np.asarray(gray, dtype=np.float64)
    gx = ndimage.correlate(gray, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(gray, SOBEL_Y, mode="nearest")
    return np.hypot(gx, gy)


LineArtExtractor = Callable[[np.ndarray], np.ndarray]


def extract_line_art(image: np.ndarray, threshold: float = 0.1, ink: float = 0.0,
                     extractor: LineArtExtractor | None = None) -> np.ndarray:
    """Return a sketch with ``ink`` where the luminance gradient exceeds ``threshold``.

    ``extractor`` swaps in an external method; it receives the RGB image and
    must return an (H, W) sketch in [0, 1].
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError(f"threshold must lie in (0, 1), got {threshold}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] < 3 or image.shape[1] < 3:
        raise InvalidInputError(f"image of shape {image.shape} is smaller than the 3x3 kernel")
    if extractor is not None:
        return check_sketch(extractor(image))
    edges = sobel_magnitude(luminance(image)) > threshold
    return np.where(edges, ink, 1.0)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a binary mask; a cell is set if any of its pixels is."""
    mask = np.asarray(mask, dtype=bool)
    if factor == 1:
        return mask.copy()
    h, w = mask.shape
    if h % factor or w % factor:
        raise InvalidInputError(f"mask {h}x{w} not divisible by {factor}")
    return mask.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """True pixels with at least one 4-neighbour outside the mask (frame edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=FOUR_NEIGHBORS, border_value=0)
    return mask & ~inner


def compute_edge_weight_map(masks: Sequence[InstanceMask], beta: float = 1.0, latent_scale: int = 8,
                            frame_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Loss weights at latent resolution: ``1 + beta`` on instance boundaries, 1 elsewhere.

    Boundaries of touching instances are unioned, never summed. ``frame_shape``
    (pixel H, W) is only needed when ``masks`` is empty.
    """
    if beta < 0:
        raise InvalidInputError("beta must be non-negative")
    if not masks:
        if frame_shape is None:
            raise InvalidInputError("frame_shape is required for an empty mask list")
        h, w = frame_shape
        return np.ones((h // latent_scale, w // latent_scale))
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise InvalidInputError("all masks must share one frame size")
    edges = np.zeros((shape[0] // latent_scale, shape[1] // latent_scale), dtype=bool)
    for m in masks:
        edges |= mask_boundary(downsample_mask(m.mask, latent_scale))
    return np.where(edges, 1.0 + beta, 1.0)


def connected_components(binary: np.ndarray, min_area: int = 16) -> list[InstanceMask]:
    """4-connected components sorted by descending area (ties in scan order)."""
    binary = np.asarray(binary, dtype=bool)
    labels, n = ndimage.label(binary, structure=FOUR_NEIGHBORS)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    order = sorted(range(n), key=lambda i: (-areas[i], i))
    return [InstanceMask.from_mask(labels == i + 1) for i in order if areas[i] >= min_area]


def apply_reference_augmentation(image: np.ndarray, flip: bool, factor: float) -> np.ndarray:
    out = image[:, ::-1] if flip else image
    return np.clip(out * factor, 0.0, 1.0)


def augment_reference(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p=0.5) and brightness factor from U[0.8, 1.2]."""
    flip = bool(rng.random() < 0.5)
    factor = float(rng.uniform(0.8, 1.2))
    return apply_reference_augmentation(np.asarray(image, dtype=np.float64), flip, factor)


def resize(image: np.ndarray, size: tuple[int, int], nearest: bool = False) -> np.ndarray:
    """Resize to ``(height, width)``; bilinear for images, nearest for masks."""
    h, w = size
    if nearest or image.dtype == bool:
        src = np.asarray(image, dtype=bool)
        rows = np.minimum((np.arange(h) + 0.5) * src.shape[0] / h, src.shape[0] - 1).astype(int)
        cols = np.minimum((np.arange(w) + 0.5) * src.shape[1] / w, src.shape[1] - 1).astype(int)
        return src[rows][:, cols]
    channels = [Image.fromarray(np.asarray(image, dtype=np.float32)[..., c], mode="F")
                .resize((w, h), Image.BILINEAR) for c in range(image.shape[2])]
    return np.clip(np.stack([np.asarray(c, dtype=np.float64) for c in channels], axis=-1), 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> None:
    """Write an RGB image, a sketch, or a boolean mask (0/255) as 8-bit PNG."""
    image = np.asarray(image)
    data = np.where(image, 255, 0).astype(np.uint8) if image.dtype == bool else to_uint8(image)
    Image.fromarray(data).save(path, format="PNG")


def load_png(path: str | Path, mode: str = "RGB") -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    return data


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128
