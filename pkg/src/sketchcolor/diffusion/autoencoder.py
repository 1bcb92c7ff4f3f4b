"""Small convolutional autoencoder standing in for the frozen VAE."""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..config import ModelConfig

log = logging.getLogger(__name__)


class _Block(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        return self.skip(x) + F.silu(self.conv(x))


class Autoencoder(nn.Module):
    """Maps [0,1] RGB (B,3,H,W) to scaled latents (B,C,H/8,W/8) and back.

    ``scale`` is fitted once after pretraining so latents have unit standard
    deviation, following the usual latent-diffusion convention.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.ae_channels
        n_down = int(np.log2(cfg.downsample))
        if 2 ** n_down != cfg.downsample:
            raise ValueError("downsample factor must be a power of two")
        widths = [c[min(i, len(c) - 1)] for i in range(n_down + 1)]
        self.n_down = n_down
        self.enc_in = nn.Conv2d(3, widths[0], 3, padding=1)
        self.enc = nn.ModuleList(_Block(widths[i], widths[i + 1]) for i in range(n_down))
        self.enc_mid = _Block(widths[-1], widths[-1])
        self.enc_out = nn.Conv2d(widths[-1], cfg.latent_channels, 1)

        self.dec_in = nn.Conv2d(cfg.latent_channels, widths[-1], 3, padding=1)
        self.dec_mid = _Block(widths[-1], widths[-1])
        # channel reduction happens before each upsample to keep full-res work small
        self.dec = nn.ModuleList(_Block(widths[i + 1], widths[i]) for i in reversed(range(n_down)))
        self.dec_full = _Block(widths[0], widths[0])
        self.dec_out = nn.Conv2d(widths[0], 3, 3, padding=1)
        self.register_buffer("scale", torch.ones(()))

    def encode_raw(self, x):
        h = self.enc_in(x * 2.0 - 1.0)
        for block in self.enc:
            h = block(F.avg_pool2d(h, 2))
        return self.enc_out(self.enc_mid(h))

    def encode(self, x):
        return self.encode_raw(x) * self.scale

    def decode(self, z):
        h = self.dec_mid(F.silu(self.dec_in(z / self.scale)))
        for block in self.dec:
            h = F.interpolate(block(h), scale_factor=2, mode="nearest")
        return (self.dec_out(self.dec_full(h)) + 1.0) / 2.0

    def forward(self, x):
        return self.decode(self.encode(x))


def pretrain_autoencoder(ae: Autoencoder, images: np.ndarray, steps: int, lr: float,
                         seed: int = 0, batch_size: int = 4) -> list[float]:
    """Fit the autoencoder on ``images`` (N,H,W,3 in [0,1]), then fit ``scale``.

    Returns the per-step reconstruction MSE history.
    """
    gen = torch.Generator().manual_seed(seed)
    data = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1), eta_min=lr * 0.05)
    ae.scale.fill_(1.0)
    history = []
    ae.train()
    for step in range(steps):
        idx = torch.randint(len(data), (min(batch_size, len(data)),), generator=gen)
        x = data[idx]
        if torch.rand((), generator=gen) < 0.5:
            x = x.flip(-1)
        loss = F.mse_loss(ae(x), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
        if step % 500 == 0:
            log.info("autoencoder step %d mse %.5f", step, history[-1])
    ae.eval()
    with torch.no_grad():
        std = torch.cat([ae.encode_raw(data[i:i + 8]) for i in range(0, len(data), 8)]).std()
        ae.scale.fill_(float(1.0 / std.clamp_min(1e-6)))
    return history
