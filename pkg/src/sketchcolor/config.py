"""Configuration tree, JSON (de)serialization, env overrides and hashing.

Every tunable lives here so that a run is fully described by one JSON file.
Environment variables prefixed ``SKETCHCOLOR__`` override fields, with
``__`` separating nesting levels, e.g. ``SKETCHCOLOR__TRAIN__LR=1e-4``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

ENV_PREFIX = "SKETCHCOLOR__"


@dataclass
class ModelConfig:
    image_size: int = 256
    latent_channels: int = 4
    downsample: int = 8
    unet_channels: tuple[int, ...] = (64, 128, 256)
    # levels (indices into unet_channels) that carry self-attention blocks
    attention_levels: tuple[int, ...] = (1, 2)
    attention_heads: int = 4
    norm_groups: int = 8
    ae_channels: tuple[int, ...] = (16, 32, 64)
    patch_channels: int = 64
    patch_stride: int = 8
    instance_size: int = 64
    feature_tap: str = "up.1"
    feature_t_frac: float = 0.4
    feature_seed: int = 1234


@dataclass
class ScheduleConfig:
    timesteps: int = 1000
    layout: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class LossConfig:
    lambda_perceptual: float = 0.1
    beta_edge: float = 1.0
    lambda_hint: float = 0.05
    hint_stride: int = 1
    x0_clamp: float = 3.0
    perceptual_channels: tuple[int, ...] = (8, 16, 32)
    perceptual_seed: int = 7


@dataclass
class DataConfig:
    n_sequences: int = 8
    frames_per_seq: int = 4
    samples_per_sequence: int = 1
    min_sprites: int = 1
    max_sprites: int = 3
    line_threshold: float = 0.1
    min_area: int = 16
    fusion_prob: float = 0.2
    scale_range: tuple[float, float] = (0.7, 1.3)
    noise_sigma_max: float = 0.05
    foreground_tol: float = 0.1


@dataclass
class TrainConfig:
    # full-scale defaults; toy runs override lr, steps and lr_schedule
    lr: float = 1e-5
    batch_size: int = 1
    steps: int = 100_000
    seed: int = 0
    dropout_rate: float = 0.1
    # "position": one coin per latent cell; "instance": one coin per instance
    dropout_unit: str = "position"
    checkpoint_every: int = 0
    ae_steps: int = 3000
    ae_lr: float = 2e-3
    grad_clip: float = 1.0
    # "constant" or "cosine" (decays to 0 at the last planned step)
    lr_schedule: str = "constant"
    # True: deterministic kernels only, same seed gives the same bytes.
    # False: throughput mode, torch may pick faster nondeterministic kernels.
    deterministic: bool = True


@dataclass
class SampleConfig:
    steps: int = 25
    eta: float = 0.0
    # clip predicted clean latents to +-x0_clamp (unit-scaled latents); None disables
    x0_clamp: float | None = 3.0
    guidance_scale: float = 1.0
    seed: int = 0


@dataclass
class Toggles:
    edge_loss: bool = True
    color_matching: bool = True
    instance_guider: bool = True


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    toggles: Toggles = field(default_factory=Toggles)

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        return _build(cls, data)

    def replace(self, **sections: dict[str, Any]) -> "Config":
        """Return a copy with the given per-section fields overridden."""
        data = self.to_dict()
        for name, updates in sections.items():
            if name not in data:
                raise ConfigError(f"unknown config section {name!r}")
            data[name].update(updates)
        return Config.from_dict(data)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, data: dict[str, Any]):
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {cls.__name__}.{key}")
        f = names[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        elif isinstance(default, bool):
            kwargs[key] = bool(value)
        elif isinstance(default, float):
            kwargs[key] = None if value is None else float(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _coerce(text: str, current):
    if isinstance(current, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, (list, tuple)):
        return [type(current[0])(v) for v in text.split(",")] if current else text.split(",")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float) or current is None:
        return None if text.strip().lower() in ("none", "null", "") else float(text)
    return text


def apply_env_overrides(cfg: Config, environ=None) -> Config:
    environ = os.environ if environ is None else environ
    data = cfg.to_dict()
    touched = False
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = data
        for part in path[:-1]:
            if part not in node:
                raise ConfigError(f"unknown config section in {key}")
            node = node[part]
        if path[-1] not in node:
            raise ConfigError(f"unknown config key in {key}")
        node[path[-1]] = _coerce(value, node[path[-1]])
        touched = True
    return Config.from_dict(data) if touched else cfg


def load_config(path: str | Path | None = None, environ=None) -> Config:
    cfg = Config()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = Config.from_dict(data)
    return apply_env_overrides(cfg, environ)


def toy_config(**sections: dict[str, Any]) -> Config:
    """Desk-scale settings used by the acceptance runs and the demos."""
    cfg = Config().replace(
        train={"lr": 5e-4, "steps": 2000, "ae_steps": 3000, "lr_schedule": "cosine"},
        sample={"steps": 25},
    )
    return cfg.replace(**sections) if sections else cfg
