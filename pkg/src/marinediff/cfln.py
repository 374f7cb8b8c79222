"""Conditional feature learning network: a four-stage mini pyramid transformer.

Input is the degraded image, the current noisy mask ``x_t`` and the step
``t``. The noisy mask enters stage 1 through a zero-initialised convolution,
so an untrained network ignores it. Each stage prepends a time token before
self-attention and drops it again before reshaping tokens back to a map.
The four stage outputs are fused top-down into a condition pyramid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

STAGE_STRIDES = (4, 2, 2, 2)


def timestep_embedding(t: Tensor, dim: int = 64, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb.to(torch.get_default_dtype())


def to_tokens(x: Tensor) -> Tensor:
    return x.flatten(2).transpose(1, 2)


def to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, h, w)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class PyramidStage(nn.Module):
    """Patch embedding + LayerNorm + time-token attention for one stage."""

    def __init__(self, c_in: int, c_out: int, stride: int, heads: int, time_dim: int, mask_branch: bool = False):
        super().__init__()
        k = 7 if stride == 4 else 3
        self.embed = nn.Conv2d(c_in, c_out, k, stride, padding=k // 2)
        self.embed_z = None
        if mask_branch:
            self.embed_z = nn.Conv2d(1, c_out, k, stride, padding=k // 2)
            nn.init.zeros_(self.embed_z.weight)
            nn.init.zeros_(self.embed_z.bias)
        self.norm = nn.LayerNorm(c_out)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.block = TransformerBlock(c_out, heads)

    def embed_tokens(self, x: Tensor, x_t: Tensor | None = None) -> tuple[Tensor, int, int]:
        f = self.embed(x)
        if self.embed_z is not None:
            if x_t is None or x_t.shape[-2:] != x.shape[-2:]:
                raise ValueError("stage 1 needs x_t with the image's spatial size")
            f = f + self.embed_z(x_t)
        h, w = f.shape[-2:]
        return self.norm(to_tokens(f)), h, w

    def attend(self, tokens: Tensor, t_emb: Tensor, h: int, w: int) -> Tensor:
        t_tok = self.time_proj(t_emb)[:, None]
        out = self.block(torch.cat([t_tok, tokens], dim=1))
        return to_map(out[:, 1:], h, w)

    def forward(self, x: Tensor, t_emb: Tensor, x_t: Tensor | None = None) -> Tensor:
        tokens, h, w = self.embed_tokens(x, x_t)
        return self.attend(tokens, t_emb, h, w)


class LocalEmphasis(nn.Module):
    """Depthwise 3x3 + pointwise projection with a residual; bias-free."""

    def __init__(self, channels: int):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False)
        self.pw = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.pw(F.gelu(self.dw(x)))


@dataclass
class ConditionStack:
    features: list[Tensor]  # F1..F4, strides 4/8/16/32
    pyramid: list[Tensor]  # aggregated maps, finest first, one per used level

    @property
    def aggregated(self) -> Tensor:
        return self.pyramid[0]


class Aggregator(nn.Module):
    """Top-down fusion: seed with LE of the deepest used level, then for each
    shallower level fuse the upsampled result with LE of that level."""

    def __init__(self, widths: tuple[int, ...], cond_width: int, layers: tuple[int, ...] = (1, 2, 3, 4)):
        super().__init__()
        if sorted(layers) != list(layers) or not layers or min(layers) < 1 or max(layers) > len(widths):
            raise ValueError(f"layers must be an ascending subset of 1..{len(widths)}, got {layers}")
        self.layers = tuple(layers)
        self.le = nn.ModuleDict({str(l): LocalEmphasis(widths[l - 1]) for l in self.layers})
        self.lateral = nn.ModuleDict({str(l): nn.Conv2d(widths[l - 1], cond_width, 1, bias=False) for l in self.layers})
        self.fuse = nn.ModuleDict(
            {str(l): nn.Conv2d(2 * cond_width, cond_width, 3, padding=1, bias=False) for l in self.layers[:-1]}
        )

    def forward(self, features: list[Tensor]) -> list[Tensor]:
        if len(features) < max(self.layers):
            raise ValueError(f"aggregation needs {max(self.layers)} stage features, got {len(features)}")
        top = self.layers[-1]
        agg = self.lateral[str(top)](self.le[str(top)](features[top - 1]))
        pyramid = [agg]
        for l in reversed(self.layers[:-1]):
            f = features[l - 1]
            up = F.interpolate(agg, size=f.shape[-2:], mode="bilinear", align_corners=False)
            agg = F.gelu(self.fuse[str(l)](torch.cat([up, self.lateral[str(l)](self.le[str(l)](f))], dim=1)))
            pyramid.insert(0, agg)
        return pyramid


class CFLN(nn.Module):
    def __init__(
        self,
        widths: tuple[int, ...] = (32, 64, 128, 256),
        heads: int = 2,
        cond_width: int = 32,
        time_dim: int = 64,
        layers: tuple[int, ...] = (1, 2, 3, 4),
        in_channels: int = 3,
    ):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("CFLN has exactly four stages")
        self.widths = tuple(widths)
        self.time_dim = time_dim
        c_ins = (in_channels,) + self.widths[:-1]
        self.stages = nn.ModuleList(
            PyramidStage(ci, co, s, heads, time_dim, mask_branch=(i == 0))
            for i, (ci, co, s) in enumerate(zip(c_ins, self.widths, STAGE_STRIDES))
        )
        self.aggregator = Aggregator(self.widths, cond_width, layers)

    def zero_overlap_embed(self, image: Tensor, x_t: Tensor) -> Tensor:
        """Stage-1 tokens ``Norm(R(Conv(image) + Conv_z(x_t)))``."""
        return self.stages[0].embed_tokens(image, x_t)[0]

    def stage_forward(self, prev: Tensor, t_emb: Tensor, stage: int, x_t: Tensor | None = None) -> Tensor:
        """Feature map of ``stage`` (1-based) from the previous map (or the image)."""
        mod = self.stages[stage - 1]
        if prev.shape[1] != mod.embed.in_channels:
            raise ValueError(f"stage {stage} expects {mod.embed.in_channels} channels, got {prev.shape[1]}")
        return mod(prev, t_emb, x_t if stage == 1 else None)

    def features(self, image: Tensor, x_t: Tensor, t: Tensor) -> list[Tensor]:
        t_emb = timestep_embedding(t, self.time_dim).to(image.dtype)
        feats, f = [], image
        for i in range(4):
            f = self.stage_forward(f, t_emb, i + 1, x_t)
            feats.append(f)
        return feats

    def aggregate_conditions(self, features: list[Tensor]) -> list[Tensor]:
        return self.aggregator(features)

    def forward(self, image: Tensor, x_t: Tensor, t: Tensor) -> ConditionStack:
        feats = self.features(image, x_t, t)
        return ConditionStack(feats, self.aggregate_conditions(feats))
