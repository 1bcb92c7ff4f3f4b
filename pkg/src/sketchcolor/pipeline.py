"""End-to-end entry points: colorize, evaluate, the toy run and ablations.

These are the functions behind the command line; they take paths or plain
arrays and return reports, so scripts and tests can call them directly.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, snapshot
from .config import Config
from .data import TrainingSample, build_dataset, load_manifest
from .errors import InvalidInputError, UsageError
from .imaging import InstanceMask, InstanceRef, load_mask, load_png, save_png
from .metrics import MetricsReport, edge_region_mse, instance_hue_error, psnr, report, ssim
from .model import ColorizationModel, sample
from .training import StagePlan, Trainer, start_model, train

log = logging.getLogger(__name__)

TOGGLE_NAMES = ("edge_loss", "color_matching", "instance_guider")


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _as_model(source: ColorizationModel | Checkpoint | str | Path) -> ColorizationModel:
    if isinstance(source, ColorizationModel):
        return source
    if not isinstance(source, Checkpoint):
        source = load_checkpoint(source)
    return source.build_model()


def load_refs(ref_paths: Sequence[str | Path], mask_paths: Sequence[str | Path],
              frame_shape: tuple[int, int]) -> list[InstanceRef]:
    if len(ref_paths) != len(mask_paths):
        raise UsageError(f"got {len(ref_paths)} references but {len(mask_paths)} masks")
    refs = []
    for rp, mp in zip(ref_paths, mask_paths):
        mask = load_mask(mp)
        if mask.shape != tuple(frame_shape):
            raise InvalidInputError(f"mask {mp} is {mask.shape}, sketch is {tuple(frame_shape)}")
        refs.append(InstanceRef(image=load_png(rp), mask=InstanceMask.from_mask(mask)))
    return refs


def colorize_arrays(model: ColorizationModel, sketch: np.ndarray, refs: Sequence[InstanceRef],
                    seed: int = 0, steps: int | None = None) -> np.ndarray:
    size = model.cfg.image_size
    if sketch.shape != (size, size):
        raise InvalidInputError(f"sketch is {sketch.shape}, model expects {size}x{size}")
    steps = model.config.sample.steps if steps is None else steps
    return sample(model, sketch, refs, steps=steps, eta=model.config.sample.eta, seed=seed)


def colorize(checkpoint, sketch_path: str | Path, ref_paths: Sequence[str | Path],
             mask_paths: Sequence[str | Path], out_path: str | Path, seed: int = 0,
             steps: int | None = None) -> Path:
    """Colorize a line-art PNG from reference crops and their target-frame masks; writes a PNG."""
    if len(ref_paths) != len(mask_paths):
        raise UsageError(f"got {len(ref_paths)} references but {len(mask_paths)} masks")
    model = _as_model(checkpoint)
    sketch = load_png(sketch_path, "L")
    refs = load_refs(ref_paths, mask_paths, sketch.shape)
    out = colorize_arrays(model, sketch, refs, seed, steps)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_png(out_path, out)
    return out_path


def predict_samples(model: ColorizationModel, samples: Sequence[TrainingSample], seed: int = 0,
                    steps: int | None = None) -> list[np.ndarray]:
    return [colorize_arrays(model, s.sketch, s.instances, seed, steps) for s in samples]


def evaluate(checkpoint, samples: Sequence[TrainingSample] | str | Path, seed: int = 0,
             steps: int | None = None, fid_features: Callable | None = None,
             lpips: Callable | None = None) -> MetricsReport:
    """Colorize every sample with one fixed seed and aggregate PSNR and SSIM.

    Never writes to the checkpoint. FID and LPIPS are filled in only when
    their plug-ins are given.
    """
    model = _as_model(checkpoint)
    if not isinstance(samples, (list, tuple)):
        samples = load_manifest(samples, model.config)
    if not samples:
        raise UsageError("the manifest holds no samples")
    preds = predict_samples(model, samples, seed, steps)
    return report(preds, [s.target for s in samples], model.config.hash(), fid_features, lpips,
                  ids=[s.sample_id for s in samples])


# -- toy run and ablations ------------------------------------------------------

@dataclass
class ToyRun:
    model: ColorizationModel
    samples: list[TrainingSample]
    initial_loss: float
    final_loss: float
    history: list = field(default_factory=list)


def run_toy(cfg: Config, seed: int = 0, stage1_steps: int = 0, stage2_steps: int | None = None,
            workdir: str | Path | None = None, autoencoder_from: ColorizationModel | None = None,
            probe: bool = True) -> ToyRun:
    """Stage 1 then stage 2 on the synthetic sprite set.

    ``initial_loss`` is the probe loss of the model entering stage 2 and
    ``final_loss`` the probe loss after it (same timesteps and noise).
    ``autoencoder_from`` reuses an already fitted autoencoder instead of
    pretraining a new one.
    """
    cfg = cfg.replace(train={"seed": seed})
    s1 = build_dataset(cfg, 1, seed)
    s2 = build_dataset(cfg, 2, seed)
    work = Path(workdir) if workdir else None
    c1 = work / "stage1.zip" if work else None
    if autoencoder_from is not None:
        fresh = ColorizationModel(cfg, seed=seed)
        fresh.autoencoder.load_state_dict(autoencoder_from.autoencoder.state_dict())
        r1 = train(cfg, StagePlan.for_stage(1, cfg, stage1_steps), s1, init=snapshot(fresh))
    else:
        r1 = train(cfg, StagePlan.for_stage(1, cfg, stage1_steps), s1)
    if c1:
        save_checkpoint(c1, r1.model, step=r1.trainer.step, stage=1)
    init2 = snapshot(r1.model, r1.trainer.step, stage=1)
    plan2 = StagePlan.for_stage(2, cfg, stage2_steps)
    model, _, _ = start_model(cfg, plan2, s2, init2)
    trainer = Trainer(model, cfg, plan2, s2, log_path=work / "stage2_loss.jsonl" if work else None)
    initial = trainer.probe_loss().total if probe else float("nan")
    history = trainer.run(plan2.steps)
    final = trainer.probe_loss().total if probe else float("nan")
    if work:
        trainer.save(work / "stage2.zip")
    model.eval()
    return ToyRun(model=model, samples=s2, initial_loss=initial, final_loss=final, history=history)


@dataclass
class AblationRow:
    name: str
    toggles: dict
    config_hash: str
    psnr: float
    ssim: float
    edge_mse: float
    hue_error: float


def score_samples(model: ColorizationModel, samples: Sequence[TrainingSample], seed: int = 0,
                  steps: int | None = None) -> dict:
    preds = predict_samples(model, samples, seed, steps)
    return {
        "psnr": float(np.mean([psnr(p, s.target) for p, s in zip(preds, samples)])),
        "ssim": float(np.mean([ssim(p, s.target) for p, s in zip(preds, samples)])),
        "edge_mse": float(np.mean([edge_region_mse(p, s.target, s.edge_masks, model.cfg.downsample)
                                   for p, s in zip(preds, samples)])),
        "hue_error": float(np.mean([instance_hue_error(p, s.target, s.edge_masks)
                                    for p, s in zip(preds, samples)])),
    }


def toggle_sets(off: Sequence[str] | None = None) -> dict[str, dict]:
    """``all`` plus one ``w/o <name>`` entry per name in ``off`` (default: every toggle)."""
    off = TOGGLE_NAMES if off is None else off
    unknown = set(off) - set(TOGGLE_NAMES)
    if unknown:
        raise UsageError(f"unknown toggles {sorted(unknown)}; choose from {TOGGLE_NAMES}")
    sets = {"all": {n: True for n in TOGGLE_NAMES}}
    for name in off:
        sets[f"w/o {name}"] = {n: n != name for n in TOGGLE_NAMES}
    return sets


def ablate(cfg: Config, off: Sequence[str] | None = None, seed: int = 0, stage1_steps: int = 0,
           stage2_steps: int | None = None, eval_samples: Sequence[TrainingSample] | None = None,
           autoencoder_from: ColorizationModel | None = None) -> list[AblationRow]:
    """Train and score the toy run once per toggle set.

    Scores use held-out ``eval_samples`` when given, else the training set.
    """
    rows = []
    for name, toggles in toggle_sets(off).items():
        run_cfg = cfg.replace(toggles=toggles)
        log.info("ablation %s (config %s)", name, run_cfg.hash())
        run = run_toy(run_cfg, seed, stage1_steps, stage2_steps, autoencoder_from=autoencoder_from, probe=False)
        scores = score_samples(run.model, eval_samples if eval_samples is not None else run.samples, seed)
        rows.append(AblationRow(name=name, toggles=toggles, config_hash=run_cfg.hash(), **scores))
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    head = f"{'setting':<24}{'PSNR':>9}{'SSIM':>9}{'edge MSE':>12}{'hue err':>10}  config"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.name:<24}{r.psnr:>9.3f}{r.ssim:>9.4f}{r.edge_mse:>12.6f}{r.hue_error:>10.4f}  {r.config_hash}")
    return "\n".join(lines)
