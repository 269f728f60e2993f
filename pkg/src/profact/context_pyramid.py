"""Feature enhancement: contextual attention block plus a dilated-convolution pyramid.

Applied to every encoder level before decoding and before the feedback fusion.
The contextual block fuses static context (a local group convolution) with a
dynamic term (an attention map, computed from the static keys concatenated
with the queries, multiplied element-wise onto the embedded values). The
pyramid then mixes parallel dilated 3x3 branches and a 1x1 branch to cover
multiple receptive fields without losing resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch


@dataclass(frozen=True)
class CspmConfig:
    dilation_rates: tuple[int, ...] = (1, 2, 3)
    cot_kernel: int = 3
    attention_reduction: int = 4
    attention_softmax: bool = False  # ablation: normalize the attention map over channels

    def __post_init__(self):
        if len(self.dilation_rates) == 0 or any(r <= 0 for r in self.dilation_rates):
            raise ValueError(f"dilation rates must be positive, got {self.dilation_rates}")
        if len(set(self.dilation_rates)) != len(self.dilation_rates):
            raise ValueError(f"dilation rates must be distinct, got {self.dilation_rates}")
        if self.cot_kernel % 2 == 0 or self.cot_kernel <= 0:
            raise ValueError("context kernel must be odd and positive")

    def to_dict(self) -> dict:
        return {
            "dilation_rates": list(self.dilation_rates),
            "cot_kernel": self.cot_kernel,
            "attention_reduction": self.attention_reduction,
            "attention_softmax": self.attention_softmax,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CspmConfig":
        return cls(
            tuple(d["dilation_rates"]),
            int(d["cot_kernel"]),
            int(d["attention_reduction"]),
            bool(d["attention_softmax"]),
        )


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis of [B, C, h, w] maps."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def _group_count(channels: int) -> int:
    if channels < 4:
        return channels
    return 4 if channels % 4 == 0 else 1


class ContextBlock(nn.Module):
    """Static + dynamic context fusion (CoT-style contextual attention).

    static  S = group 3x3 convolution of the input (local neighbor context)
    attn    A = two consecutive 1x1 convolutions over Concat[S, input]
    dynamic D = A * (1x1-embedded values), element-wise
    output    = S + D

    By default A is used as a raw product with no normalization; setting
    ``attention_softmax`` applies a channel softmax to A first.
    """

    def __init__(self, channels: int, cfg: CspmConfig | None = None):
        super().__init__()
        cfg = cfg or CspmConfig()
        self.softmax_attention = cfg.attention_softmax
        k = cfg.cot_kernel
        hidden = max(channels // cfg.attention_reduction, 4)
        self.static = nn.Conv2d(channels, channels, k, padding=k // 2, groups=_group_count(channels))
        self.attn_embed = nn.Conv2d(2 * channels, hidden, 1)
        self.attn_norm = ChannelLayerNorm(hidden)
        self.attn_project = nn.Conv2d(hidden, channels, 1)
        self.value = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ShapeMismatch(f"expected [B, C, h, w], got {tuple(x.shape)}")
        static = self.static(x)
        attn = self.attn_project(F.gelu(self.attn_norm(self.attn_embed(torch.cat([static, x], dim=1)))))
        if self.softmax_attention:
            attn = torch.softmax(attn, dim=1)
        return static + attn * self.value(x)


class DilatedPyramid(nn.Module):
    """Parallel 1x1 and dilated 3x3 branches merged by a fusing 1x1 convolution.

    A branch with rate r sees a (2r+1)^2 receptive field. Channels are
    restored to the input count by the fuse convolution, so the module is
    shape preserving.
    """

    def __init__(self, channels: int, rates: tuple[int, ...] = (1, 2, 3)):
        super().__init__()
        self.point = nn.Conv2d(channels, channels, 1)
        self.branches = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in rates
        )
        self.fuse = nn.Conv2d((1 + len(rates)) * channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = [F.gelu(self.point(x))]
        outs += [F.gelu(branch(x)) for branch in self.branches]
        return self.fuse(torch.cat(outs, dim=1))


class ContextSpatialPyramid(nn.Module):
    """Context block followed by the dilated pyramid; shape preserving."""

    def __init__(self, channels: int, cfg: CspmConfig | None = None):
        super().__init__()
        cfg = cfg or CspmConfig()
        self.context = ContextBlock(channels, cfg)
        self.pyramid = DilatedPyramid(channels, cfg.dilation_rates)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pyramid(self.context(x))
