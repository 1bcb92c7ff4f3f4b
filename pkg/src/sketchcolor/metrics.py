"""Image quality metrics and the evaluation report.

PSNR and SSIM are exact in-repo implementations on the [0, 1] range. SSIM
uses every 8x8 window position (no padding), uniform weights, population
statistics and the usual constants ``C1 = (0.01)^2``, ``C2 = (0.03)^2``;
RGB scores are the mean over channels.

FID and LPIPS need pretrained networks, so they are plug-ins:

* ``fid_features``: callable taking a float32 array (N, 3, H, W) in [0, 1]
  and returning an (N, D) feature array. The Frechet distance between the
  two feature sets is reported.
* ``lpips``: callable taking two float32 arrays (3, H, W) in [0, 1] and
  returning a float distance. The mean over samples is reported.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

from .errors import InvalidInputError, UsageError
from .imaging import InstanceMask, compute_edge_weight_map

PSNR_CAP = 99.0
SSIM_WINDOW = 8
K1, K2 = 0.01, 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * np.log10(1.0 / np.sqrt(mse)))


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: int) -> float:
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa ** 2).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    c1, c2 = K1 ** 2, K2 ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    a, b = _pair(a, b)
    if a.ndim not in (2, 3) or min(a.shape[:2]) < window:
        raise InvalidInputError(f"images of shape {a.shape} are smaller than the {window}x{window} window")
    if a.ndim == 2:
        return _ssim_channel(a, b, window)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], window) for c in range(a.shape[2])]))


def rgb_to_hue(image: np.ndarray) -> np.ndarray:
    """Hue in [0, 1) per pixel; achromatic pixels get 0."""
    image = np.asarray(image, dtype=np.float64)
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    mx = image.max(axis=-1)
    delta = mx - image.min(axis=-1)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    return np.where(delta > 0, h / 6.0, 0.0) % 1.0


def hue_distance(h1, h2) -> np.ndarray:
    """Circular distance on the unit hue circle, in [0, 0.5]."""
    d = np.abs(np.asarray(h1) - np.asarray(h2)) % 1.0
    return np.minimum(d, 1.0 - d)


def instance_hue_error(pred: np.ndarray, truth: np.ndarray, masks: Sequence[InstanceMask]) -> float:
    """Mean over instances of the mean circular hue distance inside each mask."""
    pred, truth = _pair(pred, truth)
    if not masks:
        raise InvalidInputError("hue error needs at least one instance mask")
    d = hue_distance(rgb_to_hue(pred), rgb_to_hue(truth))
    return float(np.mean([d[m.mask].mean() for m in masks]))


def edge_region(masks: Sequence[InstanceMask], latent_scale: int = 8) -> np.ndarray:
    """Pixel mask of the latent cells on instance boundaries (where the edge loss weighs more)."""
    weights = compute_edge_weight_map(masks, 1.0, latent_scale)
    return np.kron(weights > 1.0, np.ones((latent_scale, latent_scale), dtype=bool)).astype(bool)


def edge_region_mse(pred: np.ndarray, truth: np.ndarray, masks: Sequence[InstanceMask],
                    latent_scale: int = 8) -> float:
    pred, truth = _pair(pred, truth)
    region = edge_region(masks, latent_scale)
    if not region.any():
        raise InvalidInputError("edge region is empty")
    return float(np.mean((pred[region] - truth[region]) ** 2))


def frechet_distance(f1: np.ndarray, f2: np.ndarray) -> float:
    mu1, mu2 = f1.mean(axis=0), f2.mean(axis=0)
    s1 = np.atleast_2d(np.cov(f1, rowvar=False))
    s2 = np.atleast_2d(np.cov(f2, rowvar=False))
    covmean = linalg.sqrtm(s1 @ s2)
    covmean = np.real(covmean)
    return float(((mu1 - mu2) ** 2).sum() + np.trace(s1 + s2 - 2.0 * covmean))


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    count: int
    config_hash: str
    fid: float | None = None
    lpips: float | None = None
    per_sample: list | None = None

    def __post_init__(self):
        if self.count < 1:
            raise InvalidInputError("a report needs at least one sample")

    def as_dict(self) -> dict:
        return asdict(self)


def _chw_stack(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(x, np.float32).transpose(2, 0, 1) for x in images])


def report(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], config_hash: str,
           fid_features: Callable | None = None, lpips: Callable | None = None,
           ids: Sequence[str] | None = None) -> MetricsReport:
    if not preds:
        raise UsageError("nothing to evaluate")
    if len(preds) != len(truths):
        raise InvalidInputError("prediction and ground-truth counts differ")
    ps = [psnr(p, t) for p, t in zip(preds, truths)]
    ss = [ssim(p, t) for p, t in zip(preds, truths)]
    fid = lp = None
    if fid_features is not None:
        fid = frechet_distance(np.asarray(fid_features(_chw_stack(preds))),
                               np.asarray(fid_features(_chw_stack(truths))))
    if lpips is not None:
        lp = float(np.mean([lpips(np.asarray(p, np.float32).transpose(2, 0, 1),
                                  np.asarray(t, np.float32).transpose(2, 0, 1)) for p, t in zip(preds, truths)]))
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]
    per = [{"id": i, "psnr": p, "ssim": s} for i, p, s in zip(ids, ps, ss)]
    return MetricsReport(psnr=float(np.mean(ps)), ssim=float(np.mean(ss)), count=len(preds),
                         config_hash=config_hash, fid=fid, lpips=lp, per_sample=per)
