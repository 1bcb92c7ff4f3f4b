"""Self-play training data: sprite sequences, stage samples, reference sheets, manifests.

Stage 1 pairs two frames of one sequence: one is the style reference, the
other is turned into line art and is the colorization target. Stage 2 cuts
the reference frame into instances, perturbs them (shuffle, scale, fuse,
noise), pastes them onto a reference sheet and places each one with the
mask of the same object in the target frame.

All emitted pixel values are multiples of 1/255 so that PNG round trips
are exact.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .config import Config, DataConfig
from .errors import ConfigError, InvalidInputError
from .imaging import (InstanceMask, InstanceRef, augment_reference, compute_edge_weight_map,
                      connected_components, extract_line_art, load_mask, load_png, resize, save_png)

WHITE = 1.0


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class FrameSequence:
    frames: list[np.ndarray]
    sequence_id: str
    masks: list[list[np.ndarray]] | None = None  # per frame, per sprite
    colors: list[tuple[float, float, float]] = field(default_factory=list)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise InvalidInputError("a frame sequence needs at least 2 frames")
        shape = self.frames[0].shape
        if any(f.shape != shape for f in self.frames):
            raise InvalidInputError("frames in a sequence must share dimensions")


@dataclass
class TrainingSample:
    stage: int
    target: np.ndarray
    sketch: np.ndarray
    reference_sheet: np.ndarray
    instances: list[InstanceRef]
    edge_masks: list[InstanceMask]
    edge_weights: np.ndarray
    sequence_id: str = ""
    sample_id: str = ""
    seed: int = 0


# -- sprite generator ---------------------------------------------------------

_SHAPES = ("ellipse", "rectangle", "diamond")


def _sprite_mask(shape: str, size: int, cx: float, cy: float, a: float, b: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(angle), math.sin(angle)
    u, v = (c * dx + s * dy) / a, (-s * dx + c * dy) / b
    if shape == "ellipse":
        return u * u + v * v <= 1.0
    if shape == "rectangle":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    return np.abs(u) + np.abs(v) <= 1.0


def _distinct_hues(n: int, rng: np.random.Generator, min_gap: float = 0.15) -> list[float]:
    while True:
        hues = rng.random(n)
        gaps = [abs(h1 - h2) for i, h1 in enumerate(hues) for h2 in hues[i + 1:]]
        if all(min(g, 1 - g) >= min_gap for g in gaps):
            return [float(h) for h in hues]


def generate_sprite_sequence(rng: np.random.Generator, frames_per_seq: int, size: int = 256,
                             n_sprites: int | None = None, sequence_id: str = "",
                             max_sprites: int = 3, min_sprites: int = 1) -> FrameSequence:
    n = int(rng.integers(min_sprites, max_sprites + 1)) if n_sprites is None else n_sprites
    bg_v = float(rng.uniform(0.86, 1.0))
    background = tuple(float(x) for x in quantize(np.array([bg_v] * 3)))
    hues = _distinct_hues(n, rng)
    colors = []
    for h in hues:
        rgb = colorsys.hsv_to_rgb(h, float(rng.uniform(0.7, 0.95)), float(rng.uniform(0.7, 0.95)))
        colors.append(tuple(float(x) for x in quantize(np.array(rgb))))
    for _ in range(200):
        sprites = []
        for _ in range(n):
            a = rng.uniform(0.09, 0.17) * size
            b = rng.uniform(0.09, 0.17) * size
            sprites.append(dict(
                shape=_SHAPES[int(rng.integers(len(_SHAPES)))], a=a, b=b,
                cx=rng.uniform(0.25, 0.75) * size, cy=rng.uniform(0.25, 0.75) * size,
                vx=rng.uniform(-0.04, 0.04) * size, vy=rng.uniform(-0.04, 0.04) * size,
                angle=rng.uniform(0, math.pi), spin=rng.uniform(-0.2, 0.2),
            ))
        masks = []
        ok = True
        for f in range(frames_per_seq):
            frame_masks = [_sprite_mask(s["shape"], size, s["cx"] + f * s["vx"], s["cy"] + f * s["vy"],
                                        s["a"], s["b"], s["angle"] + f * s["spin"]) for s in sprites]
            margin = 3
            for m in frame_masks:
                if (m[:margin].any() or m[-margin:].any() or m[:, :margin].any() or m[:, -margin:].any()
                        or m.sum() < 64):
                    ok = False
            grown = [ndimage.binary_dilation(m, iterations=margin) for m in frame_masks]
            for i in range(n):
                for j in range(i + 1, n):
                    if (grown[i] & frame_masks[j]).any():
                        ok = False
            if not ok:
                break
            masks.append(frame_masks)
        if ok:
            break
    else:
        raise RuntimeError("could not place non-overlapping sprites")
    frames = []
    for frame_masks in masks:
        img = np.empty((size, size, 3))
        img[:] = background
        for m, col in zip(frame_masks, colors):
            img[m] = col
        frames.append(img)
    return FrameSequence(frames=frames, sequence_id=sequence_id, masks=masks, colors=colors, background=background)


def generate_sprite_dataset(n_sequences: int, frames_per_seq: int, rng: np.random.Generator,
                            size: int = 256, min_sprites: int = 1, max_sprites: int = 3) -> list[FrameSequence]:
    if n_sequences < 1:
        raise InvalidInputError("n_sequences must be >= 1")
    seeds = rng.integers(2**62, size=n_sequences)
    return [generate_sprite_sequence(np.random.default_rng(int(s)), frames_per_seq, size,
                                     sequence_id=f"seq{i:04d}", min_sprites=min_sprites, max_sprites=max_sprites)
            for i, s in enumerate(seeds)]


# -- pair sampling and instance extraction ---------------------------------------

def sample_frame_indices(n_frames: int, rng: np.random.Generator) -> tuple[int, int]:
    if n_frames < 2:
        raise InvalidInputError("need at least two frames to sample a pair")
    i, j = rng.choice(n_frames, size=2, replace=False)
    return int(i), int(j)


def sample_frame_pair(seq: FrameSequence, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two distinct frames drawn uniformly: ``(reference, target)``."""
    i, j = sample_frame_indices(len(seq.frames), rng)
    return seq.frames[i], seq.frames[j]


def foreground_mask(image: np.ndarray, tol: float = 0.1) -> np.ndarray:
    """Pixels differing from the border-median background color by more than ``tol``."""
    border = np.concatenate([image[0], image[-1], image[:, 0], image[:, -1]])
    bg = np.median(border, axis=0)
    return np.abs(image - bg).max(axis=-1) > tol


def crop_instance(image: np.ndarray, mask: InstanceMask) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, x1, y1 = mask.box
    crop = image[y0:y1, x0:x1].copy()
    inside = mask.mask[y0:y1, x0:x1]
    crop[~inside] = WHITE
    return crop, inside


def extract_instances(image: np.ndarray, masks: Sequence[np.ndarray] | None = None,
                      min_area: int = 16, tol: float = 0.1) -> list[InstanceRef]:
    """Crop each object onto white. ``masks`` bypasses the thresholding stand-in."""
    if masks is None:
        found = connected_components(foreground_mask(image, tol), min_area)
    else:
        found = [InstanceMask.from_mask(m) for m in masks]
    refs = []
    for m in found:
        crop, inside = crop_instance(image, m)
        refs.append(InstanceRef(image=crop, mask=m, crop_mask=inside))
    return refs


# -- instance augmentation ----------------------------------------------------

@dataclass
class AugmentParams:
    order: list[int]
    scales: list[float]
    fuse: bool
    noise_sigmas: list[float]
    noise_seed: int = 0

    @classmethod
    def identity(cls, n: int) -> "AugmentParams":
        return cls(order=list(range(n)), scales=[1.0] * n, fuse=False, noise_sigmas=[0.0] * n)


def draw_augment_params(n: int, rng: np.random.Generator, cfg: DataConfig | None = None) -> AugmentParams:
    cfg = cfg or DataConfig()
    lo, hi = cfg.scale_range
    return AugmentParams(
        order=[int(i) for i in rng.permutation(n)],
        scales=[float(s) for s in rng.uniform(lo, hi, size=n)],
        fuse=bool(n >= 2 and rng.random() < cfg.fusion_prob),
        noise_sigmas=[float(s) for s in rng.uniform(0.0, cfg.noise_sigma_max, size=n)],
        noise_seed=int(rng.integers(2**62)),
    )


def _scale_instance(ref: InstanceRef, s: float) -> InstanceRef:
    if s == 1.0:
        return ref
    h, w = ref.image.shape[:2]
    size = (max(1, int(round(h * s))), max(1, int(round(w * s))))
    crop_mask = ref.crop_mask if ref.crop_mask is not None else np.ones((h, w), dtype=bool)
    new_mask = resize(crop_mask, size, nearest=True)
    image = resize(ref.image, size)
    image[~new_mask] = WHITE
    return InstanceRef(image=image, mask=ref.mask, crop_mask=new_mask)


def _fuse(a: InstanceRef, b: InstanceRef) -> InstanceRef:
    h = max(a.image.shape[0], b.image.shape[0])
    w = a.image.shape[1] + b.image.shape[1]
    image = np.full((h, w, 3), WHITE)
    cmask = np.zeros((h, w), dtype=bool)
    for ref, x0 in ((a, 0), (b, a.image.shape[1])):
        rh, rw = ref.image.shape[:2]
        y0 = (h - rh) // 2
        image[y0:y0 + rh, x0:x0 + rw] = ref.image
        cm = ref.crop_mask if ref.crop_mask is not None else np.ones((rh, rw), dtype=bool)
        cmask[y0:y0 + rh, x0:x0 + rw] = cm
    return InstanceRef(image=image, mask=InstanceMask.from_mask(a.mask.mask | b.mask.mask), crop_mask=cmask)


def apply_instance_augmentation(instances: Sequence[InstanceRef], params: AugmentParams) -> list[InstanceRef]:
    out = [_scale_instance(instances[i], params.scales[k]) for k, i in enumerate(params.order)]
    if params.fuse and len(out) >= 2:
        out = [_fuse(out[0], out[1])] + out[2:]
    noise_rng = np.random.default_rng(params.noise_seed)
    result = []
    for k, ref in enumerate(out):
        sigma = params.noise_sigmas[min(k, len(params.noise_sigmas) - 1)] if params.noise_sigmas else 0.0
        image = ref.image
        if sigma > 0:
            image = np.clip(image + noise_rng.normal(0.0, sigma, image.shape), 0.0, 1.0)
        result.append(InstanceRef(image=image, mask=ref.mask, crop_mask=ref.crop_mask))
    return result


def augment_instances(instances: Sequence[InstanceRef], rng: np.random.Generator,
                      cfg: DataConfig | None = None) -> list[InstanceRef]:
    """Shuffle, rescale in [0.7, 1.3], fuse a pair with p=0.2, add Gaussian noise."""
    return apply_instance_augmentation(instances, draw_augment_params(len(instances), rng, cfg))


# -- reference sheet ------------------------------------------------------------

@dataclass
class SheetLayout:
    image: np.ndarray
    placements: list[tuple[int, int, int, int]]  # (x0, y0, x1, y1) per instance
    shrunk: list[bool]


def compose_reference_sheet(images: Sequence[np.ndarray], size: int = 256) -> SheetLayout:
    """Paste crops row-major into a near-square grid of cells on a white canvas.

    Each crop is centred in its cell at native size, or shrunk with its
    aspect ratio kept when it does not fit (flagged in ``shrunk``).
    """
    if not images:
        raise InvalidInputError("a reference sheet needs at least one instance")
    n = len(images)
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    cell_h, cell_w = size // rows, size // cols
    canvas = np.full((size, size, 3), WHITE)
    placements, shrunk = [], []
    for k, img in enumerate(images):
        h, w = img.shape[:2]
        scale = min(1.0, cell_h / h, cell_w / w)
        if scale < 1.0:
            h, w = max(1, int(math.floor(h * scale))), max(1, int(math.floor(w * scale)))
            img = resize(img, (h, w))
        r, c = divmod(k, cols)
        y0 = r * cell_h + (cell_h - h) // 2
        x0 = c * cell_w + (cell_w - w) // 2
        canvas[y0:y0 + h, x0:x0 + w] = img
        placements.append((x0, y0, x0 + w, y0 + h))
        shrunk.append(scale < 1.0)
    return SheetLayout(image=canvas, placements=placements, shrunk=shrunk)


# -- sample builders ------------------------------------------------------------

def build_stage1_sample(reference: np.ndarray, target: np.ndarray, rng: np.random.Generator,
                        cfg: Config | None = None) -> TrainingSample:
    cfg = cfg or Config()
    if reference.shape != target.shape:
        raise InvalidInputError("reference and target must share dimensions")
    sketch = extract_line_art(target, cfg.data.line_threshold)
    sheet = quantize(augment_reference(reference, rng))
    edge_masks = connected_components(foreground_mask(target, cfg.data.foreground_tol), cfg.data.min_area)
    weights = compute_edge_weight_map(edge_masks, cfg.loss.beta_edge, cfg.model.downsample, target.shape[:2])
    return TrainingSample(stage=1, target=target, sketch=sketch, reference_sheet=sheet, instances=[],
                          edge_masks=edge_masks, edge_weights=weights)


def build_stage2_sample(reference: np.ndarray, target: np.ndarray, reference_masks: Sequence[np.ndarray],
                        target_masks: Sequence[np.ndarray], rng: np.random.Generator,
                        cfg: Config | None = None) -> TrainingSample:
    """``reference_masks[i]`` and ``target_masks[i]`` must outline the same object."""
    cfg = cfg or Config()
    if len(reference_masks) != len(target_masks):
        raise InvalidInputError("reference and target mask lists differ in length")
    sketch = extract_line_art(target, cfg.data.line_threshold)
    refs = extract_instances(reference, reference_masks)
    placed = [InstanceRef(image=r.image, mask=InstanceMask.from_mask(m), crop_mask=r.crop_mask)
              for r, m in zip(refs, target_masks)]
    instances = augment_instances(placed, rng, cfg.data)
    instances = [InstanceRef(image=quantize(r.image), mask=r.mask, crop_mask=r.crop_mask) for r in instances]
    sheet = compose_reference_sheet([r.image for r in instances], cfg.model.image_size).image
    edge_masks = [r.mask for r in instances]
    weights = compute_edge_weight_map(edge_masks, cfg.loss.beta_edge, cfg.model.downsample, target.shape[:2])
    return TrainingSample(stage=2, target=target, sketch=sketch, reference_sheet=sheet, instances=instances,
                          edge_masks=edge_masks, edge_weights=weights)


def build_dataset(cfg: Config, stage: int, seed: int = 0,
                  sequences: list[FrameSequence] | None = None) -> list[TrainingSample]:
    """Deterministic in ``(cfg, stage, seed)``; each sequence gets its own substream."""
    if stage not in (1, 2):
        raise ConfigError(f"unknown stage {stage}")
    d = cfg.data
    if sequences is None:
        sequences = generate_sprite_dataset(d.n_sequences, d.frames_per_seq, np.random.default_rng(seed),
                                            cfg.model.image_size, d.min_sprites, d.max_sprites)
    samples = []
    for k, seq in enumerate(sequences):
        for j in range(d.samples_per_sequence):
            sub = int(np.random.SeedSequence([seed, stage, k, j]).generate_state(1, np.uint64)[0] >> 2)
            rng = np.random.default_rng(sub)
            i_ref, i_tgt = sample_frame_indices(len(seq.frames), rng)
            ref, tgt = seq.frames[i_ref], seq.frames[i_tgt]
            if stage == 1:
                s = build_stage1_sample(ref, tgt, rng, cfg)
            else:
                if seq.masks is None:
                    raise ConfigError(f"sequence {seq.sequence_id} has no instance masks for stage 2")
                s = build_stage2_sample(ref, tgt, seq.masks[i_ref], seq.masks[i_tgt], rng, cfg)
            s.sequence_id = seq.sequence_id
            s.sample_id = f"{seq.sequence_id}_s{stage}_{j:02d}"
            s.seed = sub
            samples.append(s)
    return samples


# -- manifest -------------------------------------------------------------------

MANIFEST_NAME = "manifest.jsonl"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(samples: Sequence[TrainingSample], out_dir: str | Path) -> Path:
    """Write PNGs and one JSON record per line; see the README for the schema."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        sdir = out / s.sample_id
        sdir.mkdir(exist_ok=True)
        files = {"target": s.target, "sketch": s.sketch, "sheet": s.reference_sheet}
        record = {"id": s.sample_id, "stage": s.stage, "sequence_id": s.sequence_id, "seed": s.seed}
        hashes = {}
        for name, img in files.items():
            path = sdir / f"{name}.png"
            save_png(path, img)
            record[name] = str(path.relative_to(out))
            hashes[name] = _sha256(path)
        record["instances"] = []
        for i, r in enumerate(s.instances):
            crop, mask = sdir / f"instance{i}_crop.png", sdir / f"instance{i}_mask.png"
            save_png(crop, r.image)
            save_png(mask, r.mask.mask)
            record["instances"].append({"crop": str(crop.relative_to(out)), "mask": str(mask.relative_to(out)),
                                        "box": list(r.mask.box)})
            hashes[f"instance{i}_crop"] = _sha256(crop)
            hashes[f"instance{i}_mask"] = _sha256(mask)
        record["edge_masks"] = []
        if s.stage == 1:
            for i, m in enumerate(s.edge_masks):
                path = sdir / f"edge{i}_mask.png"
                save_png(path, m.mask)
                record["edge_masks"].append(str(path.relative_to(out)))
                hashes[f"edge{i}_mask"] = _sha256(path)
        record["hashes"] = hashes
        lines.append(json.dumps(record, sort_keys=True))
    path = out / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path: str | Path, cfg: Config | None = None) -> list[TrainingSample]:
    cfg = cfg or Config()
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    root = path.parent
    samples = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        target = load_png(root / rec["target"])
        instances = []
        for inst in rec["instances"]:
            m = InstanceMask.from_mask(load_mask(root / inst["mask"]))
            if list(m.box) != list(inst["box"]):
                raise InvalidInputError(f"manifest box {inst['box']} disagrees with mask {m.box}")
            instances.append(InstanceRef(image=load_png(root / inst["crop"]), mask=m))
        if rec["stage"] == 2:
            edge_masks = [r.mask for r in instances]
        else:
            edge_masks = [InstanceMask.from_mask(load_mask(root / p)) for p in rec["edge_masks"]]
        weights = compute_edge_weight_map(edge_masks, cfg.loss.beta_edge, cfg.model.downsample, target.shape[:2])
        samples.append(TrainingSample(
            stage=rec["stage"], target=target, sketch=load_png(root / rec["sketch"], "L"),
            reference_sheet=load_png(root / rec["sheet"]), instances=instances, edge_masks=edge_masks,
            edge_weights=weights, sequence_id=rec["sequence_id"], sample_id=rec["id"], seed=rec["seed"]))
    return samples
