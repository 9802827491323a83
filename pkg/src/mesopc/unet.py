"""Attention-free U-Net denoiser with noise-level conditioning.

Residual blocks with GroupNorm/SiLU and a scale-shift from the noise
embedding; strided-conv downsampling and nearest+conv upsampling.  No
attention anywhere.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatchError


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_freq: float = 1000.0) -> torch.Tensor:
    """Map scalars [B] to [B, dim] sin/cos features with geometric frequencies."""
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(max_freq), half, device=x.device, dtype=x.dtype)
    )
    ang = x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb_proj(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class DenoiserUNet(nn.Module):
    """U-shaped denoiser conditioned on a noise-level scalar.

    Args:
        in_channels: field channels (input and output).
        base_embed: channel count at the top level.
        multipliers: per-level channel scaling, length = number of levels.
        res_blocks: residual blocks per level on each side.
    """

    def __init__(
        self,
        in_channels: int,
        base_embed: int = 32,
        multipliers: tuple[int, ...] = (1, 2, 2, 2),
        res_blocks: int = 2,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.levels = len(multipliers)
        self.emb_dim = base_embed * 4
        self.divisor = 2 ** (self.levels - 1)

        self.emb_mlp = nn.Sequential(
            nn.Linear(base_embed, self.emb_dim),
            nn.SiLU(),
            nn.Linear(self.emb_dim, self.emb_dim),
        )
        self._emb_in = base_embed

        dims = [base_embed * m for m in multipliers]
        self.stem = nn.Conv2d(in_channels, dims[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = dims[0]
        for i, d in enumerate(dims):
            blocks = nn.ModuleList()
            for _ in range(res_blocks):
                blocks.append(ResBlock(ch, d, self.emb_dim))
                ch = d
            self.down_blocks.append(blocks)
            if i < self.levels - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid1 = ResBlock(ch, ch, self.emb_dim)
        self.mid2 = ResBlock(ch, ch, self.emb_dim)

        self.up_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in range(self.levels - 1, -1, -1):
            d = dims[i]
            blocks = nn.ModuleList()
            for _ in range(res_blocks):
                blocks.append(ResBlock(ch + d, d, self.emb_dim))
                ch = d
            self.up_blocks.append(blocks)
            if i > 0:
                self.ups.append(nn.Conv2d(ch, dims[i - 1], 3, padding=1))
                ch = dims[i - 1]

        self.out_norm = _norm(ch)
        self.head = nn.Conv2d(ch, in_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"expected {self.in_channels} channels, got {x.shape[1]}"
            )
        if x.shape[-2] % self.divisor or x.shape[-1] % self.divisor:
            raise ShapeMismatchError(
                f"grid {x.shape[-2]}x{x.shape[-1]} not divisible by {self.divisor}"
            )
        emb = self.emb_mlp(sinusoidal_embedding(c_noise, self._emb_in))

        h = self.stem(x)
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
            if i < self.levels - 1:
                h = self.downs[i](h)

        h = self.mid1(h, emb)
        h = self.mid2(h, emb)

        for j, blocks in enumerate(self.up_blocks):
            skip = skips[self.levels - 1 - j]
            for block in blocks:
                h = block(torch.cat([h, skip], dim=1), emb)
            if j < self.levels - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[j](h)

        return self.head(F.silu(self.out_norm(h)))
