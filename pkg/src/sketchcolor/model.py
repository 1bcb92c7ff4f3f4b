"""The full colorization network and its sampler.

Named sub-modules (these names are also the checkpoint keys and the units
that stage plans train or freeze):

``autoencoder``      frozen latent codec
``unet``             epsilon-prediction denoiser
``reference_net``    UNet twin read out at t=0 on the reference sheet
``sketch_guider``    ControlNet branch fed the unshuffled sketch
``instance_guider``  ControlNet branch fed the latent control signal
``patch_encoder``    frozen instance encoder producing patch grids
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import Config
from .data import compose_reference_sheet
from .diffusion.autoencoder import Autoencoder
from .diffusion.schedule import NoiseSchedule, make_schedule, predict_x0
from .diffusion.unet import Guider, UNet
from .errors import ConfigError, InvalidInputError
from .features import PatchEncoder, encode_instance
from .imaging import InstanceRef, check_sketch, resize
from .instance_control import compose_latent_control

MODULE_NAMES = ("autoencoder", "unet", "reference_net", "sketch_guider", "instance_guider", "patch_encoder")


@dataclass
class ConditionBundle:
    sketch: torch.Tensor  # (B, downsample**2, H', W')
    reference_hidden: list[torch.Tensor] | None = None
    latent_control: torch.Tensor | None = None  # (B, C, H', W')
    guidance_scale: float = 1.0


class ColorizationModel(nn.Module):
    def __init__(self, cfg: Config, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        m = cfg.model
        self.config = cfg
        self.cfg = m
        self.autoencoder = Autoencoder(m)
        self.unet = UNet(m)
        self.reference_net = UNet(m)
        self.sketch_guider = Guider(m, m.downsample ** 2)
        self.instance_guider = Guider(m, m.patch_channels)
        self.patch_encoder = PatchEncoder(m.patch_channels, m.patch_stride)
        self.sketch_guider.load_from_unet(self.unet)
        self.instance_guider.load_from_unet(self.unet)
        self.reference_net.load_state_dict(self.unet.state_dict())
        self.schedule: NoiseSchedule = make_schedule(
            cfg.schedule.timesteps, cfg.schedule.layout, cfg.schedule.beta_start, cfg.schedule.beta_end)
        self.use_instance_guider = cfg.toggles.instance_guider

    @property
    def latent_dims(self) -> tuple[int, int]:
        s = self.cfg.image_size // self.cfg.downsample
        return s, s

    def image_tensor(self, image: np.ndarray) -> torch.Tensor:
        image = np.asarray(image, dtype=np.float64)
        dtype = next(self.parameters()).dtype
        return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].to(dtype)

    def sketch_condition(self, sketch: np.ndarray) -> torch.Tensor:
        """Ink density (1 - sketch) rearranged losslessly to latent resolution."""
        sketch = check_sketch(sketch, self.cfg.downsample)
        dtype = next(self.parameters()).dtype
        x = torch.from_numpy(1.0 - sketch)[None, None].to(dtype)
        return F.pixel_unshuffle(x, self.cfg.downsample)

    def reference_hidden(self, sheet_latent: torch.Tensor) -> list[torch.Tensor]:
        """Attention-block inputs of the reference net run at t=0."""
        collect: list[torch.Tensor] = []
        self.reference_net(sheet_latent, torch.zeros(sheet_latent.shape[0], dtype=torch.long), collect=collect)
        return collect

    def latent_control(self, refs: Sequence[InstanceRef], rate: float = 0.0,
                       rng: np.random.Generator | None = None, grids=None) -> torch.Tensor:
        if grids is None:
            grids = self.encode_instances(refs)
        signal = compose_latent_control(list(zip(grids, [r.mask for r in refs])), rate, rng,
                                        self.latent_dims, channels=self.cfg.patch_channels,
                                        unit=self.config.train.dropout_unit)
        dtype = next(self.parameters()).dtype
        return torch.from_numpy(signal.tensor)[None].to(dtype)

    def encode_instances(self, refs: Sequence[InstanceRef]):
        size = self.cfg.instance_size
        return [encode_instance(self.patch_encoder, resize(r.image, (size, size)), r.mask.box) for r in refs]

    def predict_noise(self, z_t: torch.Tensor, t, cond: ConditionBundle, stage: int | None = None) -> torch.Tensor:
        if stage == 1 and cond.latent_control is not None:
            raise ConfigError("stage 1 does not take a latent control signal")
        if stage == 2 and self.use_instance_guider and cond.latent_control is None:
            raise ConfigError("stage 2 requires a latent control signal")
        if cond.sketch.shape[-2:] != z_t.shape[-2:]:
            raise InvalidInputError("sketch condition and latent differ in spatial size")
        residuals = self.sketch_guider(z_t, t, cond.sketch)
        if cond.latent_control is not None and self.use_instance_guider:
            extra = self.instance_guider(z_t, t, cond.latent_control)
            residuals = [a + b for a, b in zip(residuals, extra)]
        return self.unet(z_t, t, ref_hiddens=cond.reference_hidden, residuals=residuals)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise InvalidInputError(f"steps must lie in [1, {T}], got {steps}")
    return np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(np.int64))[::-1]


@torch.no_grad()
def ddim_sample(model: ColorizationModel, cond: ConditionBundle, steps: int, eta: float = 0.0,
                seed: int = 0, trajectory: list | None = None) -> torch.Tensor:
    """DDIM from a seeded Gaussian latent; returns the final clean latent.

    Each predicted clean latent is clipped to ``sample.x0_clamp`` and the
    noise estimate recomputed from it, which keeps the noise-dominated
    first steps from overshooting.
    """
    clamp = model.config.sample.x0_clamp
    b = cond.sketch.shape[0]
    shape = (b, model.cfg.latent_channels, *model.latent_dims)
    gen = torch.Generator().manual_seed(seed)
    dtype = cond.sketch.dtype
    x = torch.randn(shape, generator=gen, dtype=torch.float32).to(dtype)
    alphas = torch.as_tensor(model.schedule.alphas, dtype=torch.float64)
    ts = ddim_timesteps(model.schedule.T, steps)
    for i, t in enumerate(ts):
        tt = torch.full((b,), int(t), dtype=torch.long)
        eps = model.predict_noise(x, tt, cond)
        a = alphas[t].to(dtype)
        a_next = alphas[ts[i + 1]].to(dtype) if i + 1 < len(ts) else torch.ones((), dtype=dtype)
        x0 = predict_x0(x, eps, tt, model.schedule, clamp=clamp)
        if clamp is not None:
            eps = (x - a.sqrt() * x0) / (1 - a).sqrt()
        sigma = eta * ((1 - a_next) / (1 - a) * (1 - a / a_next)).clamp_min(0).sqrt()
        x = a_next.sqrt() * x0 + (1 - a_next - sigma ** 2).clamp_min(0).sqrt() * eps
        if eta > 0:
            x = x + sigma * torch.randn(shape, generator=gen, dtype=torch.float32).to(dtype)
        if trajectory is not None:
            trajectory.append(x.clone())
    return x


@torch.no_grad()
def sample(model: ColorizationModel, sketch: np.ndarray, refs: Sequence[InstanceRef],
           steps: int = 25, eta: float = 0.0, seed: int = 0, sheet: np.ndarray | None = None) -> np.ndarray:
    """Colorize ``sketch`` from reference instances in one sampling run.

    The reference sheet is composed from ``refs`` unless given. With no refs
    the reference attention sees no extra tokens and the control signal is
    all zeros.
    """
    model.eval()
    cond = build_condition(model, sketch, refs, sheet)
    z = ddim_sample(model, cond, steps, eta, seed)
    img = model.autoencoder.decode(z)[0].clamp(0, 1)
    return img.permute(1, 2, 0).double().numpy()


def build_condition(model: ColorizationModel, sketch: np.ndarray, refs: Sequence[InstanceRef],
                    sheet: np.ndarray | None = None) -> ConditionBundle:
    sketch_t = model.sketch_condition(sketch)
    if sheet is None and refs:
        sheet = compose_reference_sheet([r.image for r in refs], model.cfg.image_size).image
    hidden = None
    if sheet is not None:
        hidden = model.reference_hidden(model.autoencoder.encode(model.image_tensor(sheet)))
    lc = model.latent_control(refs) if model.use_instance_guider else None
    return ConditionBundle(sketch=sketch_t, reference_hidden=hidden, latent_control=lc)
