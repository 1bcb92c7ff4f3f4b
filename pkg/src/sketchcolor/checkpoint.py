"""Checkpoint archive: one uncompressed zip of ``.npy`` arrays plus ``meta.json``.

Layout (entries sorted by name, timestamps fixed at 1980-01-01 00:00:00)::

    meta.json                              format_version, config, schedule, step, stage, flags
    weights/<module>/<state_dict key>.npy  float32 or int64 arrays, little-endian .npy v1.0
    optim/<module>/<key>/<slot>.npy        Adam moments (exp_avg, exp_avg_sq), when saved

``<module>`` is one of autoencoder, unet, reference_net, sketch_guider,
instance_guider, patch_encoder. Writing the same state twice yields the
same bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .errors import StateError
from .model import MODULE_NAMES, ColorizationModel

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), version=(1, 0), allow_pickle=False)
    return buf.getvalue()


def _write_zip(path: Path, entries: dict[str, bytes]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            info.create_system = 3
            zf.writestr(info, entries[name])


def model_arrays(model: ColorizationModel) -> dict[str, np.ndarray]:
    out = {}
    for name in MODULE_NAMES:
        for key, value in getattr(model, name).state_dict().items():
            out[f"weights/{name}/{key}.npy"] = value.detach().cpu().numpy()
    return out


def optimizer_arrays(model: ColorizationModel, optimizer: torch.optim.Optimizer) -> tuple[dict, int]:
    out = {}
    step = 0
    for name in MODULE_NAMES:
        for key, p in getattr(model, name).named_parameters():
            state = optimizer.state.get(p)
            if not state:
                continue
            step = int(state["step"])
            for slot in ("exp_avg", "exp_avg_sq"):
                out[f"optim/{name}/{key}/{slot}.npy"] = state[slot].detach().cpu().numpy()
    return out, step


def save_checkpoint(path: str | Path, model: ColorizationModel, step: int = 0, stage: int = 0,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = model_arrays(model)
    optim_step = 0
    if optimizer is not None:
        optim, optim_step = optimizer_arrays(model, optimizer)
        arrays.update(optim)
    cfg = model.config
    meta = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "schedule": {"layout": model.schedule.layout, "timesteps": model.schedule.T},
        "step": int(step),
        "stage": int(stage),
        "optim_step": optim_step,
        "extra": extra or {},
    }
    entries = {name: _npy_bytes(a) for name, a in arrays.items()}
    entries["meta.json"] = (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode()
    _write_zip(path, entries)
    return path


class Checkpoint:
    """Parsed archive contents."""

    def __init__(self, meta: dict, arrays: dict[str, np.ndarray]):
        self.meta = meta
        self.arrays = arrays

    @property
    def config(self) -> Config:
        return Config.from_dict(self.meta["config"])

    @property
    def step(self) -> int:
        return self.meta["step"]

    @property
    def stage(self) -> int:
        return self.meta["stage"]

    def build_model(self, config: Config | None = None) -> ColorizationModel:
        model = ColorizationModel(config or self.config)
        for name in MODULE_NAMES:
            module = getattr(model, name)
            state = {}
            for key in module.state_dict():
                entry = f"weights/{name}/{key}.npy"
                if entry not in self.arrays:
                    raise StateError(f"checkpoint lacks {entry}")
                state[key] = torch.from_numpy(self.arrays[entry].copy())
            module.load_state_dict(state)
        model.eval()
        return model

    def restore_optimizer(self, model: ColorizationModel, optimizer: torch.optim.Optimizer) -> None:
        step = self.meta.get("optim_step", 0)
        for name in MODULE_NAMES:
            for key, p in getattr(model, name).named_parameters():
                base = f"optim/{name}/{key}/"
                if base + "exp_avg.npy" not in self.arrays:
                    continue
                optimizer.state[p] = {
                    "step": torch.tensor(float(step)),
                    "exp_avg": torch.from_numpy(self.arrays[base + "exp_avg.npy"].copy()),
                    "exp_avg_sq": torch.from_numpy(self.arrays[base + "exp_avg_sq.npy"].copy()),
                }


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint {path} not found")
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise StateError(f"unsupported checkpoint format {meta.get('format_version')}")
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return Checkpoint(meta, arrays)


def snapshot(model: ColorizationModel, step: int = 0, stage: int = 0) -> Checkpoint:
    """In-memory checkpoint of ``model``, as if saved and loaded again."""
    meta = {"format_version": FORMAT_VERSION, "config": model.config.to_dict(), "step": int(step),
            "stage": int(stage), "optim_step": 0, "extra": {}}
    return Checkpoint(meta, {k: v.copy() for k, v in model_arrays(model).items()})
