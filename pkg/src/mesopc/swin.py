"""U-shaped windowed-attention network for one-step prediction.

Blocks follow the v2 flavor: cosine attention with a learned per-head
temperature, residual-post-norm layout, and a learned relative position
bias per window.  Shifted windows use a cyclic roll without boundary
masks; the synthetic domain is periodic, so wrapped attention is the
natural choice.  Decoder upsampling is a dual block (bilinear branch +
subpixel branch merged by a learned 1x1 mix); the subpixel convolution
is ICNR-initialized so a constant field stays constant, avoiding
checkerboard artifacts at initialization.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatchError


def window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    """[B, H, W, C] -> [B * nWindows, w*w, C]"""
    b, h, width, c = x.shape
    x = x.view(b, h // w, w, width // w, w, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, w * w, c)


def window_reverse(windows: torch.Tensor, w: int, h: int, width: int) -> torch.Tensor:
    """Inverse of `window_partition`."""
    b = windows.shape[0] // ((h // w) * (width // w))
    x = windows.view(b, h // w, width // w, w, w, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, width, -1)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class WindowAttention(nn.Module):
    """Cosine-similarity window attention with relative position bias.

    Args:
        dim: token embedding size.
        window: window side length.
        num_heads: attention heads; dim must divide evenly.
    """

    def __init__(self, dim: int, window: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ShapeMismatchError(f"dim {dim} not divisible by heads {num_heads}")
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.logit_scale = nn.Parameter(
            torch.log(10.0 * torch.ones(num_heads, 1, 1))
        )
        self.bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, num_heads)
        )
        nn.init.trunc_normal_(self.bias_table, std=0.02)

        coords = torch.stack(
            torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :]
        rel = rel.permute(1, 2, 0) + (window - 1)
        index = rel[..., 0] * (2 * window - 1) + rel[..., 1]
        self.register_buffer("bias_index", index, persistent=False)

    def forward(self, x):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        scale = torch.clamp(self.logit_scale, max=math.log(100.0)).exp()
        attn = (q @ k.transpose(-2, -1)) * scale
        bias = self.bias_table[self.bias_index.view(-1)].view(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(x)


class SwinBlock(nn.Module):
    """Window attention + MLP with residual-post-norm; optional cyclic shift."""

    def __init__(self, dim: int, window: int, num_heads: int, shift: bool, mlp_ratio: float):
        super().__init__()
        self.window = window
        self.shift = window // 2 if shift else 0
        self.attn = WindowAttention(dim, window, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, hw):
        h, w = hw
        b, n, c = x.shape
        y = x.view(b, h, w, c)
        if self.shift:
            y = torch.roll(y, shifts=(-self.shift, -self.shift), dims=(1, 2))
        y = window_partition(y, self.window)
        y = self.attn(y)
        y = window_reverse(y, self.window, h, w)
        if self.shift:
            y = torch.roll(y, shifts=(self.shift, self.shift), dims=(1, 2))
        x = x + self.norm1(y.view(b, n, c))
        x = x + self.norm2(self.mlp(x))
        return x


class PatchMerging(nn.Module):
    """2x2 token merge: concat -> norm -> linear, doubling the channel size."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x, hw):
        h, w = hw
        b, n, c = x.shape
        y = x.view(b, h, w, c)
        y = torch.cat(
            [y[:, 0::2, 0::2], y[:, 1::2, 0::2], y[:, 0::2, 1::2], y[:, 1::2, 1::2]],
            dim=-1,
        )
        y = y.view(b, (h // 2) * (w // 2), 4 * c)
        return self.reduce(self.norm(y)), (h // 2, w // 2)


class DualUpsample(nn.Module):
    """2x upsampling: bilinear and subpixel branches merged by a 1x1 mix.

    Args:
        in_ch: input channels.
        out_ch: output channels of the merged result.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.bilinear_proj = nn.Conv2d(in_ch, out_ch, 1)
        self.subpixel_conv = nn.Conv2d(in_ch, out_ch * 4, 1)
        self.shuffle = nn.PixelShuffle(2)
        self.mix = nn.Conv2d(2 * out_ch, out_ch, 1)
        self._icnr_init()

    def _icnr_init(self):
        # All four shuffle phases share weights, so constants stay constant.
        w = torch.empty(self.subpixel_conv.out_channels // 4, self.subpixel_conv.in_channels, 1, 1)
        nn.init.kaiming_uniform_(w, a=math.sqrt(5))
        with torch.no_grad():
            self.subpixel_conv.weight.copy_(w.repeat_interleave(4, dim=0))
            bias = torch.zeros(self.subpixel_conv.out_channels // 4)
            self.subpixel_conv.bias.copy_(bias.repeat_interleave(4, dim=0))

    def forward(self, x):
        a = self.bilinear_proj(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
        b = self.shuffle(self.subpixel_conv(x))
        return self.mix(torch.cat([a, b], dim=1))


class SwinUnet(nn.Module):
    """Encoder-decoder over tokens with patch merging and dual upsampling.

    Maps [B, C, H, W] -> [B, C, H, W] through a global residual: the
    network predicts the update to the input state.  Two normalized
    coordinate channels are appended internally so spatially varying
    dynamics are representable.  H and W must be divisible by
    window * 2^(stages-1); with `pad_to_fit` the input is reflect-padded
    to the next valid size and the output cropped back.
    """

    def __init__(
        self,
        in_channels: int,
        embed_dim: int = 32,
        window: int = 4,
        depths: tuple[int, ...] = (2, 2, 2),
        heads: tuple[int, ...] = (2, 4, 8),
        mlp_ratio: float = 4.0,
        pad_to_fit: bool = True,
    ):
        super().__init__()
        if len(depths) != len(heads):
            raise ShapeMismatchError("depths and heads must have equal length")
        self.in_channels = in_channels
        self.window = window
        self.n_stages = len(depths)
        self.pad_to_fit = pad_to_fit
        self.divisor = window * 2 ** (self.n_stages - 1)

        dims = [embed_dim * 2**i for i in range(self.n_stages)]
        self.stem = nn.Conv2d(in_channels + 2, embed_dim, 3, padding=1)

        self.enc_stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i in range(self.n_stages - 1):
            self.enc_stages.append(
                nn.ModuleList(
                    [
                        SwinBlock(dims[i], window, heads[i], shift=bool(j % 2), mlp_ratio=mlp_ratio)
                        for j in range(depths[i])
                    ]
                )
            )
            self.merges.append(PatchMerging(dims[i]))
        self.bottleneck = nn.ModuleList(
            [
                SwinBlock(dims[-1], window, heads[-1], shift=bool(j % 2), mlp_ratio=mlp_ratio)
                for j in range(depths[-1])
            ]
        )

        self.upsamples = nn.ModuleList()
        self.skip_reduces = nn.ModuleList()
        self.dec_stages = nn.ModuleList()
        for i in range(self.n_stages - 2, -1, -1):
            self.upsamples.append(DualUpsample(dims[i + 1], dims[i]))
            self.skip_reduces.append(nn.Linear(2 * dims[i], dims[i]))
            self.dec_stages.append(
                nn.ModuleList(
                    [
                        SwinBlock(dims[i], window, heads[i], shift=bool(j % 2), mlp_ratio=mlp_ratio)
                        for j in range(depths[i])
                    ]
                )
            )

        self.head = nn.Conv2d(embed_dim, in_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _coords(self, b: int, h: int, w: int, like: torch.Tensor) -> torch.Tensor:
        ys = torch.linspace(0.0, 1.0, h, device=like.device, dtype=like.dtype)
        xs = torch.linspace(0.0, 1.0, w, device=like.device, dtype=like.dtype)
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([yy, xx]).unsqueeze(0).expand(b, -1, -1, -1)

    def required_padding(self, h: int, w: int) -> tuple[int, int]:
        d = self.divisor
        return (-h) % d, (-w) % d

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"expected {self.in_channels} channels, got {x.shape[1]}"
            )
        b, _, h0, w0 = x.shape
        pad_h, pad_w = self.required_padding(h0, w0)
        if pad_h or pad_w:
            if not self.pad_to_fit:
                raise ShapeMismatchError(
                    f"grid {h0}x{w0} not divisible by {self.divisor}; "
                    f"pad y by {pad_h} and x by {pad_w}, or enable pad_to_fit"
                )
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        res = x
        b, _, h, w = x.shape

        y = self.stem(torch.cat([x, self._coords(b, h, w, x)], dim=1))
        tokens = y.flatten(2).transpose(1, 2)
        hw = (h, w)

        skips = []
        for stage, merge in zip(self.enc_stages, self.merges):
            for block in stage:
                tokens = block(tokens, hw)
            skips.append((tokens, hw))
            tokens, hw = merge(tokens, hw)
        for block in self.bottleneck:
            tokens = block(tokens, hw)

        for up, reduce, stage, (skip, skip_hw) in zip(
            self.upsamples, self.skip_reduces, self.dec_stages, reversed(skips)
        ):
            img = tokens.transpose(1, 2).view(b, -1, hw[0], hw[1])
            img = up(img)
            hw = skip_hw
            tokens = img.flatten(2).transpose(1, 2)
            tokens = reduce(torch.cat([tokens, skip], dim=-1))
            for block in stage:
                tokens = block(tokens, hw)

        img = tokens.transpose(1, 2).view(b, -1, h, w)
        out = res + self.head(img)
        if pad_h or pad_w:
            out = out[:, :, :h0, :w0]
        return out
