"""Two-stage training: stage plans, per-step loss assembly and the optimization loop.

Every step draws its randomness from a generator seeded by
``(train.seed, stage, step)``, so a run resumed from a checkpoint taken at
step k continues exactly as the unbroken run would have.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, save_checkpoint
from .config import Config
from .data import TrainingSample
from .diffusion.autoencoder import pretrain_autoencoder
from .diffusion.schedule import add_noise, predict_x0
from .errors import ConfigError, StateError
from .features import extract_dense_features
from .losses import (LossBreakdown, PerceptualFeatureStack, hint_consistency_loss, ldm_loss,
                     perceptual_loss, total_loss)
from .matching import transfer_color_hints
from .model import MODULE_NAMES, ColorizationModel, ConditionBundle

log = logging.getLogger(__name__)

STAGE_TRAINABLE = {
    1: frozenset({"unet", "reference_net", "sketch_guider"}),
    2: frozenset({"unet", "reference_net", "sketch_guider", "instance_guider"}),
}


@dataclass(frozen=True)
class StagePlan:
    stage: int
    trainable: frozenset
    frozen: frozenset
    steps: int
    lr: float
    batch_size: int = 1

    def __post_init__(self):
        if self.stage not in STAGE_TRAINABLE:
            raise ConfigError(f"unknown stage {self.stage}")
        if self.trainable & self.frozen:
            raise ConfigError(f"modules both trainable and frozen: {sorted(self.trainable & self.frozen)}")
        if not self.trainable <= STAGE_TRAINABLE[self.stage]:
            raise ConfigError(f"stage {self.stage} cannot train {sorted(self.trainable - STAGE_TRAINABLE[self.stage])}")
        if self.trainable | self.frozen != frozenset(MODULE_NAMES):
            raise ConfigError("stage plan must assign every module")

    @classmethod
    def for_stage(cls, stage: int, cfg: Config, steps: int | None = None) -> "StagePlan":
        if stage not in STAGE_TRAINABLE:
            raise ConfigError(f"unknown stage {stage}")
        trainable = STAGE_TRAINABLE[stage]
        if not cfg.toggles.instance_guider:
            trainable = trainable - {"instance_guider"}
        return cls(stage=stage, trainable=trainable, frozen=frozenset(MODULE_NAMES) - trainable,
                   steps=cfg.train.steps if steps is None else steps, lr=cfg.train.lr,
                   batch_size=cfg.train.batch_size)


def audit_optimizer(model: ColorizationModel, optimizer: torch.optim.Optimizer, plan: StagePlan) -> None:
    """Refuse optimizers holding parameters of modules the plan freezes."""
    owner = {id(p): name for name in MODULE_NAMES for p in getattr(model, name).parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = owner.get(id(p))
            if name not in plan.trainable:
                raise StateError(f"optimizer holds parameters of {name!r}, frozen in stage {plan.stage}")


@dataclass
class PreparedSample:
    sample: TrainingSample
    z0: torch.Tensor
    sketch: torch.Tensor
    sheet_latent: torch.Tensor
    target_image: torch.Tensor
    target_decoded: torch.Tensor
    weights: torch.Tensor
    grids: list = field(default_factory=list)


@torch.no_grad()
def prepare_samples(model: ColorizationModel, samples: Sequence[TrainingSample]) -> list[PreparedSample]:
    """Encode everything the frozen modules produce once per run."""
    out = []
    for s in samples:
        target = model.image_tensor(s.target)
        z0 = model.autoencoder.encode(target)
        out.append(PreparedSample(
            sample=s, z0=z0, sketch=model.sketch_condition(s.sketch),
            sheet_latent=model.autoencoder.encode(model.image_tensor(s.reference_sheet)),
            target_image=target, target_decoded=model.autoencoder.decode(z0),
            weights=torch.from_numpy(s.edge_weights)[None].to(z0.dtype),
            grids=model.encode_instances(s.instances) if s.instances else [],
        ))
    return out


LR_SCHEDULES = ("constant", "cosine")


def lr_factor(schedule: str, step: int, total: int) -> float:
    """Multiplier on the base lr for the update taken at ``step`` (0-based) of ``total``."""
    if schedule == "constant" or total <= 0:
        return 1.0
    if schedule == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))
    raise ConfigError(f"unknown lr schedule {schedule!r}; choose from {LR_SCHEDULES}")


def _step_seed(seed: int, stage: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, stage, step]).generate_state(1, np.uint64)[0] >> 1)


class Trainer:
    def __init__(self, model: ColorizationModel, cfg: Config, plan: StagePlan,
                 samples: Sequence[TrainingSample], log_path: str | Path | None = None,
                 optimizer_state: Checkpoint | None = None, start_step: int = 0):
        if plan.stage == 2 and any(s.stage != 2 for s in samples):
            raise ConfigError("stage-2 plan requires stage-2 samples")
        if not samples:
            raise ConfigError("no training samples")
        self.model = model
        self.cfg = cfg
        self.plan = plan
        self.step = start_step
        model.use_instance_guider = cfg.toggles.instance_guider
        for name in MODULE_NAMES:
            getattr(model, name).requires_grad_(name in plan.trainable)
        params = [p for name in sorted(plan.trainable) for p in getattr(model, name).parameters()]
        self.optimizer = torch.optim.Adam(params, lr=plan.lr)
        lr_factor(cfg.train.lr_schedule, 0, plan.steps)  # reject unknown schedules up front
        audit_optimizer(model, self.optimizer, plan)
        if optimizer_state is not None:
            optimizer_state.restore_optimizer(model, self.optimizer)
        self.stack = PerceptualFeatureStack(3, cfg.loss.perceptual_channels, cfg.loss.perceptual_seed)
        self.prepared = prepare_samples(model, samples)
        self.log_path = Path(log_path) if log_path else None

    # -- loss assembly ---------------------------------------------------------

    def color_hints(self, prep: PreparedSample):
        target_f = extract_dense_features(self.model, prep.target_image)
        ref_f = extract_dense_features(self.model, self.model.image_tensor(prep.sample.reference_sheet))
        return transfer_color_hints(target_f, ref_f, prep.sample.reference_sheet, self.cfg.loss.hint_stride)

    def sample_loss(self, prep: PreparedSample, t: torch.Tensor, eps: torch.Tensor,
                    rng: np.random.Generator | None, dropout: float) -> tuple[torch.Tensor, LossBreakdown]:
        model, cfg = self.model, self.cfg
        z_t = add_noise(prep.z0, eps, t, model.schedule)
        lc = None
        if self.plan.stage == 2 and cfg.toggles.instance_guider:
            lc = model.latent_control(prep.sample.instances, dropout, rng, grids=prep.grids)
        cond = ConditionBundle(sketch=prep.sketch, reference_hidden=model.reference_hidden(prep.sheet_latent),
                               latent_control=lc)
        eps_hat = model.predict_noise(z_t, t, cond, stage=self.plan.stage)
        weights = prep.weights if cfg.toggles.edge_loss else None
        ldm = ldm_loss(eps, eps_hat, weights)
        perc = hint = None
        need_decode = cfg.loss.lambda_perceptual > 0 or (cfg.toggles.color_matching and cfg.loss.lambda_hint > 0)
        if need_decode:
            x0 = predict_x0(z_t, eps_hat, t, model.schedule, clamp=cfg.loss.x0_clamp)
            decoded = model.autoencoder.decode(x0)
            if cfg.loss.lambda_perceptual > 0:
                perc = perceptual_loss(prep.target_decoded, decoded, self.stack)
            if cfg.toggles.color_matching and cfg.loss.lambda_hint > 0:
                hints = self.color_hints(prep)
                small = F.avg_pool2d(decoded, model.cfg.downsample)
                hint = hint_consistency_loss(small, hints)
        loss_cfg = cfg.loss if cfg.toggles.color_matching else replace(cfg.loss, lambda_hint=0.0)
        return total_loss(ldm, perc, hint, loss_cfg)

    def train_step(self) -> LossBreakdown:
        seed = _step_seed(self.cfg.train.seed, self.plan.stage, self.step)
        rng = np.random.default_rng(seed)
        gen = torch.Generator().manual_seed(seed)
        self.model.train()
        self.model.autoencoder.eval()
        self.optimizer.zero_grad(set_to_none=True)
        parts = []
        total = 0.0
        for _ in range(self.plan.batch_size):
            prep = self.prepared[int(rng.integers(len(self.prepared)))]
            t = torch.randint(self.model.schedule.T, (1,), generator=gen)
            eps = torch.randn(prep.z0.shape, generator=gen, dtype=torch.float32).to(prep.z0.dtype)
            loss, bd = self.sample_loss(prep, t, eps, rng, self.cfg.train.dropout_rate)
            (loss / self.plan.batch_size).backward()
            parts.append(bd)
            total += bd.total
        if self.cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_([p for g in self.optimizer.param_groups for p in g["params"]],
                                           self.cfg.train.grad_clip)
        scale = lr_factor(self.cfg.train.lr_schedule, self.step, self.plan.steps)
        for group in self.optimizer.param_groups:
            group["lr"] = self.plan.lr * scale
        self.optimizer.step()
        self.step += 1
        n = len(parts)
        return LossBreakdown(total=total / n, ldm=sum(p.ldm for p in parts) / n,
                             perceptual=sum(p.perceptual for p in parts) / n, hint=sum(p.hint for p in parts) / n)

    @torch.no_grad()
    def probe_loss(self, per_sample: int = 8, seed: int = 99) -> LossBreakdown:
        """Deterministic loss over evenly spaced timesteps and fixed noise, no dropout."""
        self.model.eval()
        gen = torch.Generator().manual_seed(seed)
        T = self.model.schedule.T
        parts = []
        for prep in self.prepared:
            for k in range(per_sample):
                t = torch.tensor([int((k + 0.5) * T / per_sample)])
                eps = torch.randn(prep.z0.shape, generator=gen, dtype=torch.float32).to(prep.z0.dtype)
                parts.append(self.sample_loss(prep, t, eps, None, 0.0)[1])
        n = len(parts)
        return LossBreakdown(total=sum(p.total for p in parts) / n, ldm=sum(p.ldm for p in parts) / n,
                             perceptual=sum(p.perceptual for p in parts) / n, hint=sum(p.hint for p in parts) / n)

    def run(self, steps: int, checkpoint_path: str | Path | None = None,
            checkpoint_every: int = 0) -> list[LossBreakdown]:
        history = []
        log_file = self.log_path.open("a") if self.log_path else None
        start = time.time()
        try:
            for _ in range(steps):
                bd = self.train_step()
                history.append(bd)
                if log_file:
                    record = {"step": self.step, "stage": self.plan.stage, **bd.as_dict(),
                              "wall": round(time.time() - start, 3)}
                    log_file.write(json.dumps(record) + "\n")
                if self.step % 100 == 0:
                    log.info("stage %d step %d loss %.4f", self.plan.stage, self.step, bd.total)
                if checkpoint_path and checkpoint_every and self.step % checkpoint_every == 0:
                    self.save(checkpoint_path)
        finally:
            if log_file:
                log_file.close()
        return history

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.model, step=self.step, stage=self.plan.stage, optimizer=self.optimizer)


def _ae_images(samples: Sequence[TrainingSample], extra: np.ndarray | None) -> np.ndarray:
    images = [s.target for s in samples] + [s.reference_sheet for s in samples]
    if extra is not None:
        images.extend(list(extra))
    return np.stack(images)


def start_model(cfg: Config, plan: StagePlan, samples: Sequence[TrainingSample],
                init: Checkpoint | None = None, ae_images: np.ndarray | None = None):
    """Build or restore the model for ``plan``; returns (model, resume step, optimizer source)."""
    if init is None:
        if plan.stage == 2:
            raise StateError("stage 2 requires a stage-1 checkpoint")
        model = ColorizationModel(cfg, seed=cfg.train.seed)
        if cfg.train.ae_steps > 0:
            pretrain_autoencoder(model.autoencoder, _ae_images(samples, ae_images), cfg.train.ae_steps,
                                 cfg.train.ae_lr, seed=cfg.train.seed)
        model.autoencoder.requires_grad_(False)
        return model, 0, None
    if init.config.model != cfg.model:
        raise ConfigError("checkpoint model architecture differs from the configuration")
    if plan.stage == 2 and init.stage < 1:
        raise StateError("stage 2 requires a stage-1 checkpoint")
    model = init.build_model(cfg)
    if init.stage == plan.stage:
        return model, init.step, init
    if plan.stage == 2:
        # ControlNet-style start: copy the trained denoiser encoder, projections stay zero
        model.instance_guider.load_from_unet(model.unet)
    return model, 0, None


@dataclass
class TrainResult:
    model: ColorizationModel
    trainer: Trainer
    history: list[LossBreakdown]


def train(cfg: Config, plan: StagePlan, samples: Sequence[TrainingSample], init: Checkpoint | None = None,
          checkpoint_path: str | Path | None = None, log_path: str | Path | None = None,
          ae_images: np.ndarray | None = None) -> TrainResult:
    torch.use_deterministic_algorithms(cfg.train.deterministic)
    model, start_step, optim_src = start_model(cfg, plan, samples, init, ae_images)
    trainer = Trainer(model, cfg, plan, samples, log_path, optimizer_state=optim_src, start_step=start_step)
    remaining = max(plan.steps - start_step, 0) if optim_src is not None else plan.steps
    history = trainer.run(remaining, checkpoint_path, cfg.train.checkpoint_every)
    if checkpoint_path:
        trainer.save(checkpoint_path)
    model.eval()
    return TrainResult(model=model, trainer=trainer, history=history)
