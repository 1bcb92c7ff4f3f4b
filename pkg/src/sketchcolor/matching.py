"""Nearest-neighbour feature correspondence and color hint transfer.

Matching is exhaustive. Reference rows are deduplicated before the search,
so exact ties always resolve to the lowest flat index regardless of how the
distance kernel rounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NoMatchError
from .features import FeatureMap

ZERO_FLOOR = 1e-8


@dataclass(frozen=True)
class CorrespondenceMap:
    index: np.ndarray  # (h, w, 2) (row, col) into the reference grid
    distance: np.ndarray  # (h, w)


@dataclass(frozen=True)
class ColorFeaturePair:
    """Flattened, row-normalized source and reference features with their grid shapes."""

    c_source: np.ndarray
    c_reference: np.ndarray
    source_shape: tuple[int, int]
    reference_shape: tuple[int, int]

    @classmethod
    def from_maps(cls, source: FeatureMap, reference: FeatureMap, eps_floor: bool = False):
        return cls(
            c_source=normalize_rows(source.features.reshape(-1, source.features.shape[-1]), eps_floor),
            c_reference=normalize_rows(reference.features.reshape(-1, reference.features.shape[-1]), eps_floor),
            source_shape=source.shape,
            reference_shape=reference.shape,
        )


@dataclass(frozen=True)
class ColorHints:
    rows: np.ndarray
    cols: np.ndarray
    colors: np.ndarray  # (K, 3)
    shape: tuple[int, int]


def normalize_rows(x: np.ndarray, eps_floor: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if eps_floor:
        norms = np.maximum(norms, ZERO_FLOOR)
    elif np.any(norms == 0):
        raise InvalidInputError("zero feature vector cannot be normalized")
    return x / norms


def euclidean_distance(v1, v2) -> float:
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape or v1.ndim != 1 or v1.size == 0:
        raise InvalidInputError(f"vectors must be 1-D with equal length, got {v1.shape} and {v2.shape}")
    return float(np.sqrt(np.sum((v1 - v2) ** 2)))


def cosine_distance(v1, v2, eps_floor: bool = False) -> float:
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape or v1.ndim != 1:
        raise InvalidInputError(f"vectors must be 1-D with equal length, got {v1.shape} and {v2.shape}")
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if eps_floor:
        n1, n2 = max(n1, ZERO_FLOOR), max(n2, ZERO_FLOOR)
    elif n1 == 0 or n2 == 0:
        raise InvalidInputError("cosine distance of a zero vector is undefined")
    return float(1.0 - np.dot(v1, v2) / (n1 * n2))


def _distances(src: np.ndarray, ref: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        return np.sqrt(np.sum((src[:, None, :] - ref[None, :, :]) ** 2, axis=-1))
    if metric == "cosine":
        sn = np.linalg.norm(src, axis=1)
        rn = np.linalg.norm(ref, axis=1)
        if np.any(sn == 0) or np.any(rn == 0):
            raise InvalidInputError("cosine distance of a zero vector is undefined")
        return 1.0 - (src @ ref.T) / (sn[:, None] * rn[None, :])
    raise InvalidInputError(f"unknown metric {metric!r}")


def nearest_rows(source: np.ndarray, reference: np.ndarray, metric: str = "euclidean",
                 tile: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Flat argmin index and distance of each source row over the reference rows."""
    source = np.asarray(source, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if source.ndim != 2 or reference.ndim != 2 or not len(source) or not len(reference):
        raise InvalidInputError("source and reference must be non-empty 2-D matrices")
    if source.shape[1] != reference.shape[1]:
        raise InvalidInputError(f"feature widths differ: {source.shape[1]} vs {reference.shape[1]}")
    # np.unique sorts, so map each unique row back to its first occurrence
    uniq, first = np.unique(reference, axis=0, return_index=True)
    order = np.argsort(first, kind="stable")
    uniq, first = uniq[order], first[order]
    index = np.empty(len(source), dtype=np.int64)
    dist = np.empty(len(source))
    # euclidean broadcasts (tile, n_ref, f); keep that product bounded
    step = tile if metric == "cosine" else max(1, min(tile, 2_000_000 // max(1, uniq.size)))
    for start in range(0, len(source), step):
        d = _distances(source[start:start + step], uniq, metric)
        k = np.argmin(d, axis=1)
        index[start:start + step] = first[k]
        dist[start:start + step] = d[np.arange(len(k)), k]
    return index, dist


def semantic_match(pair: ColorFeaturePair, metric: str = "euclidean") -> CorrespondenceMap:
    flat, dist = nearest_rows(pair.c_source, pair.c_reference, metric)
    _, rw = pair.reference_shape
    h, w = pair.source_shape
    index = np.stack([flat // rw, flat % rw], axis=-1).reshape(h, w, 2)
    return CorrespondenceMap(index=index, distance=dist.reshape(h, w))


def inject_features(f1: FeatureMap, f2: FeatureMap, p1: tuple[int, int]) -> tuple[int, int]:
    """Integer position in ``f2`` whose feature is cosine-closest to ``f1`` at ``p1``."""
    h, w = f1.shape
    r, c = int(p1[0]), int(p1[1])
    if not (0 <= r < h and 0 <= c < w):
        raise InvalidInputError(f"position {p1} outside {h}x{w}")
    query = f1.features[r, c]
    if not np.any(query):
        raise NoMatchError(f"zero feature vector at {p1}")
    flat, _ = nearest_rows(query[None], f2.features.reshape(-1, f2.features.shape[-1]), "cosine")
    return int(flat[0] // f2.shape[1]), int(flat[0] % f2.shape[1])


def transfer_color_hints(target: FeatureMap, reference: FeatureMap, ref_image: np.ndarray,
                         stride: int = 1) -> ColorHints:
    """Reference colors at the cosine match of every ``stride``-th target position.

    ``ref_image`` is area-averaged down to the reference feature grid first.
    """
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    th, tw = target.shape
    rh, rw = reference.shape
    colors = _area_downsample(np.asarray(ref_image, dtype=np.float64), (rh, rw))
    rows, cols = np.meshgrid(np.arange(0, th, stride), np.arange(0, tw, stride), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    query = target.features[rows, cols]
    if np.any(~query.any(axis=1)):
        raise NoMatchError("zero feature vector in target map")
    flat, _ = nearest_rows(query, reference.features.reshape(-1, reference.features.shape[-1]), "cosine")
    return ColorHints(rows=rows, cols=cols, colors=colors.reshape(-1, 3)[flat], shape=(th, tw))


def _area_downsample(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = image.shape[:2]
    gh, gw = size
    if h % gh or w % gw:
        raise InvalidInputError(f"image {h}x{w} does not tile into {gh}x{gw}")
    return image.reshape(gh, h // gh, gw, w // gw, -1).mean(axis=(1, 3))
