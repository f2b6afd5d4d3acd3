"""Conditional U-Net predicting the clean target image from the noisy
target, the pre-contrast conditioning channel, and (optionally) a tumor
mask channel, with residual blocks and bottleneck self-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2  # 2 = pre + noisy target, 3 adds a mask channel
    base_width: int = 32
    depth: int = 3
    attention_at_bottleneck: bool = True
    time_embed_dim: int = 128

    def __post_init__(self):
        if self.in_channels not in (2, 3):
            raise ValueError(f"in_channels must be 2 or 3, got {self.in_channels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 8:
            raise ValueError(f"base_width must be >= 8, got {self.base_width}")


@dataclass(frozen=True)
class ConditionBundle:
    """Conditioning channels; mask present iff the variant is mask-conditioned."""

    pre: torch.Tensor
    mask: Optional[torch.Tensor] = None


def stack_model_input(pre: torch.Tensor, noisy: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    """Fixed channel order: [pre, noisy_target] or [pre, noisy_target, mask]."""
    parts = [pre, noisy] if mask is None else [pre, noisy, mask]
    shapes = {tuple(p.shape) for p in parts}
    if len(shapes) != 1:
        raise ValueError(f"conditioning channels disagree in shape: {sorted(shapes)}")
    return torch.cat(parts, dim=1)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style sin/cos embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.device)
    angles = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class UNet(nn.Module):
    """Depth-stage encoder/decoder with skip connections; one residual block
    per stage at desk scale, widths doubling toward the bottleneck."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        tdim = config.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))

        widths = [config.base_width * (2**i) for i in range(config.depth + 1)]
        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i in range(config.depth):
            self.down_blocks.append(ResBlock(widths[i], widths[i], tdim))
            self.downsamples.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))

        self.mid_block1 = ResBlock(widths[-1], widths[-1], tdim)
        self.mid_attn = SelfAttention2d(widths[-1]) if config.attention_at_bottleneck else nn.Identity()
        self.mid_block2 = ResBlock(widths[-1], widths[-1], tdim)

        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(config.depth)):
            self.upsamples.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.up_blocks.append(ResBlock(widths[i] * 2, widths[i], tdim))

        self.head_norm = _norm(widths[0])
        self.head = nn.Conv2d(widths[0], 1, 3, padding=1)

    def forward(self, x_t: torch.Tensor, cond: ConditionBundle, t) -> torch.Tensor:
        if x_t.ndim != 4:
            raise ValueError(f"expected [B,1,H,W] noisy input, got shape {tuple(x_t.shape)}")
        x = stack_model_input(cond.pre, x_t, cond.mask)
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"model expects {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        h_, w_ = x.shape[-2:]
        div = 2**self.config.depth
        if h_ % div or w_ % div:
            raise ValueError(f"spatial dims {h_}x{w_} not divisible by 2^depth={div}")

        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t), dtype=torch.long, device=x.device)
        elif t.ndim == 0:
            t = t.repeat(x.shape[0])
        temb = sinusoidal_embedding(t, self.config.time_embed_dim).to(x.dtype)
        temb = self.time_mlp(temb)

        h = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)

        h = self.mid_block1(h, temb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, temb)

        for up, block in zip(self.upsamples, self.up_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), temb)

        out = self.head(F.silu(self.head_norm(h)))
        if not torch.isfinite(out).all():
            raise FloatingPointError("backbone produced non-finite outputs")
        return out
