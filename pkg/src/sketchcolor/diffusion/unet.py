"""Denoising UNet with reference attention, plus ControlNet-style guiders.

The same :class:`UNet` class serves as the denoiser and as the reference
net (its twin). Every self-attention block of the denoiser attends over its
own tokens concatenated with the matching block's tokens from the reference
net. Guiders copy the down path, encode a latent-shaped condition and emit
one zero-initialized residual per skip connection plus one for the middle
block.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..config import ModelConfig
from ..errors import ConfigError, InvalidInputError


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    g = math.gcd(channels, groups)
    return nn.GroupNorm(g, channels)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = _norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    # pool-then-conv keeps the block mirror-equivariant on even grids
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.avg_pool2d(x, 2))


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Attention(nn.Module):
    """Projections for (reference) self-attention over a token sequence."""

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)


def reference_attention(x: torch.Tensor, r: torch.Tensor | None, attn: Attention,
                        return_weights: bool = False):
    """Attend from ``x`` (B, N, C) over the concatenated tokens ``[x; r]``.

    Queries come from ``x`` only, so the output keeps ``x``'s shape. An empty
    or missing ``r`` reduces to plain self-attention.
    """
    if r is not None and r.shape[-1] != x.shape[-1]:
        raise InvalidInputError(f"channel mismatch {x.shape[-1]} vs {r.shape[-1]}")
    context = x if r is None or r.shape[1] == 0 else torch.cat([x, r], dim=1)
    b, n, c = x.shape
    h = attn.heads
    d = c // h
    q = attn.to_q(x).reshape(b, n, h, d).transpose(1, 2)
    k = attn.to_k(context).reshape(b, -1, h, d).transpose(1, 2)
    v = attn.to_v(context).reshape(b, -1, h, d).transpose(1, 2)
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = attn.to_out((weights @ v).transpose(1, 2).reshape(b, n, c))
    return (out, weights) if return_weights else out


class AttnBlock(nn.Module):
    def __init__(self, channels: int, heads: int, groups: int):
        super().__init__()
        self.norm = _norm(channels, groups)
        self.attn = Attention(channels, heads)

    def forward(self, x, ref=None, collect=None):
        b, c, hh, ww = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        if collect is not None:
            collect.append(tokens)
        out = reference_attention(tokens, ref, self.attn)
        return x + out.transpose(1, 2).reshape(b, c, hh, ww)


class _Level(nn.Module):
    def __init__(self, cin, cout, temb_dim, cfg: ModelConfig, attn: bool):
        super().__init__()
        self.res = ResBlock(cin, cout, temb_dim, cfg.norm_groups)
        self.attn = AttnBlock(cout, cfg.attention_heads, cfg.norm_groups) if attn else None


class _Encoder(nn.Module):
    """Time embedding, input conv, down path and middle block."""

    def __init__(self, cfg: ModelConfig, in_channels: int):
        super().__init__()
        ch = cfg.unet_channels
        self.temb_in = ch[0]
        temb_dim = ch[0] * 4
        self.time_mlp = nn.Sequential(nn.Linear(ch[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(in_channels, ch[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.down.append(_Level(prev, c, temb_dim, cfg, i in cfg.attention_levels))
            if i < len(ch) - 1:
                self.downsample.append(Downsample(c))
            prev = c
        self.mid1 = ResBlock(ch[-1], ch[-1], temb_dim, cfg.norm_groups)
        self.mid_attn = AttnBlock(ch[-1], cfg.attention_heads, cfg.norm_groups)
        self.mid2 = ResBlock(ch[-1], ch[-1], temb_dim, cfg.norm_groups)

    def embed_time(self, t, dtype):
        return self.time_mlp(timestep_embedding(t, self.temb_in).to(dtype))

    def encode(self, h, temb, refs, collect):
        skips = []
        for i, level in enumerate(self.down):
            h = level.res(h, temb)
            if level.attn is not None:
                h = level.attn(h, next(refs), collect)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid1(h, temb)
        h = self.mid_attn(h, next(refs), collect)
        h = self.mid2(h, temb)
        return skips, h


class UNet(_Encoder):
    """Epsilon-prediction UNet over latents.

    ``forward`` accepts the reference-net hidden states (one per attention
    block, in execution order) and guider residuals (one per skip, then one
    for the middle block). ``collect`` receives this net's own attention
    inputs, which is how the reference net is read out. ``taps`` receives
    the decoder level outputs keyed ``"up.<level>"``.
    """

    def __init__(self, cfg: ModelConfig, in_channels: int | None = None):
        in_channels = in_channels or cfg.latent_channels
        super().__init__(cfg, in_channels)
        ch = cfg.unet_channels
        temb_dim = ch[0] * 4
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        prev = ch[-1]
        for i in reversed(range(len(ch))):
            self.up.append(_Level(prev + ch[i], ch[i], temb_dim, cfg, i in cfg.attention_levels))
            if i > 0:
                self.upsample.append(Upsample(ch[i]))
            prev = ch[i]
        self.out_norm = _norm(ch[0], cfg.norm_groups)
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)
        self.n_levels = len(ch)

    @property
    def attention_block_count(self) -> int:
        return sum(1 for m in self.modules() if isinstance(m, AttnBlock))

    @property
    def tap_ids(self) -> list[str]:
        return [f"up.{i}" for i in range(self.n_levels)]

    def forward(self, z, t, ref_hiddens=None, residuals=None, collect=None, taps=None):
        n_attn = self.attention_block_count
        if ref_hiddens is not None and len(ref_hiddens) not in (0, n_attn):
            raise InvalidInputError(f"expected {n_attn} reference hidden states, got {len(ref_hiddens)}")
        refs = iter(ref_hiddens if ref_hiddens else [None] * n_attn)
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        temb = self.embed_time(t, z.dtype)
        skips, h = self.encode(self.conv_in(z), temb, refs, collect)
        if residuals is not None:
            if len(residuals) != len(skips) + 1:
                raise InvalidInputError(f"expected {len(skips) + 1} residuals, got {len(residuals)}")
            skips = [s + r for s, r in zip(skips, residuals[:-1])]
            h = h + residuals[-1]
        for j, level in enumerate(self.up):
            i = self.n_levels - 1 - j
            h = level.res(torch.cat([h, skips[i]], dim=1), temb)
            if level.attn is not None:
                h = level.attn(h, next(refs), collect)
            if taps is not None:
                taps[f"up.{i}"] = h
            if j < len(self.upsample):
                h = self.upsample[j](h)
        return self.conv_out(F.silu(self.out_norm(h)))


class Guider(_Encoder):
    """ControlNet-style branch: down-path copy plus zero-initialized projections."""

    def __init__(self, cfg: ModelConfig, cond_channels: int):
        super().__init__(cfg, cfg.latent_channels)
        ch = cfg.unet_channels
        self.cond_in = nn.Sequential(
            nn.Conv2d(cond_channels, ch[0], 3, padding=1), nn.SiLU(),
            nn.Conv2d(ch[0], ch[0], 3, padding=1),
        )
        self.zero_convs = nn.ModuleList(zero_module(nn.Conv2d(c, c, 1)) for c in ch)
        self.zero_mid = zero_module(nn.Conv2d(ch[-1], ch[-1], 1))
        self.n_attn = sum(1 for m in self.modules() if isinstance(m, AttnBlock))

    def load_from_unet(self, unet: UNet) -> None:
        """Copy the denoiser's encoder weights (ControlNet initialization)."""
        own = self.state_dict()
        for name, value in unet.state_dict().items():
            if name in own and own[name].shape == value.shape and not name.startswith("zero"):
                own[name] = value.clone()
        self.load_state_dict(own)

    def forward(self, z, t, cond):
        if cond.shape[-2:] != z.shape[-2:]:
            raise InvalidInputError(f"condition spatial dims {tuple(cond.shape[-2:])} != latent {tuple(z.shape[-2:])}")
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        temb = self.embed_time(t, z.dtype)
        h = self.conv_in(z) + self.cond_in(cond)
        skips, h = self.encode(h, temb, iter([None] * self.n_attn), None)
        out = [zc(s) for zc, s in zip(self.zero_convs, skips)]
        out.append(self.zero_mid(h))
        return out


def guider_forward(guider: Guider, z, t, condition):
    return guider(z, t, condition)
