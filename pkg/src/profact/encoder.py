"""Hierarchical four-stage transformer encoder producing a multi-scale feature pyramid.

Mix-Transformer style (Segformer family): overlapped strided patch embedding,
efficient self-attention with spatially reduced keys/values, and a feed-forward
block whose 3x3 depth-wise convolution supplies positional information, so no
positional-encoding tables are needed and any padded input size is accepted.
Stage i outputs a feature map at exactly 1/(4 * 2^(i-1)) of the input size.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch
from .data import PAD_MULTIPLE


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, int, int, int] = (32, 64, 160, 256)
    stage_depths: tuple[int, int, int, int] = (2, 2, 2, 2)
    attention_heads: tuple[int, int, int, int] = (1, 2, 5, 8)
    reduction_ratios: tuple[int, int, int, int] = (8, 4, 2, 1)
    ffn_expansion: int = 4

    def __post_init__(self):
        for name in ("stage_channels", "stage_depths", "attention_heads", "reduction_ratios"):
            values = getattr(self, name)
            if len(values) != 4 or any(v <= 0 for v in values):
                raise ValueError(f"{name} must be 4 positive integers, got {values}")
        if any(a > b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage channels must be nondecreasing, got {self.stage_channels}")
        for c, h in zip(self.stage_channels, self.attention_heads):
            if c % h:
                raise ValueError(f"channels {c} not divisible by head count {h}")
        if self.ffn_expansion <= 0:
            raise ValueError("ffn_expansion must be positive")

    @classmethod
    def tiny(cls) -> "EncoderConfig":
        """Minimal configuration for fast CPU tests."""
        return cls((16, 32, 64, 128), (1, 1, 1, 1), (1, 2, 4, 8), (8, 4, 2, 1), 2)

    @classmethod
    def full(cls) -> "EncoderConfig":
        """MiT-B3-sized backbone (the full-scale default)."""
        return cls((64, 128, 320, 512), (3, 4, 18, 3), (1, 2, 5, 8), (8, 4, 2, 1), 4)

    def to_dict(self) -> dict:
        return {
            "stage_channels": list(self.stage_channels),
            "stage_depths": list(self.stage_depths),
            "attention_heads": list(self.attention_heads),
            "reduction_ratios": list(self.reduction_ratios),
            "ffn_expansion": self.ffn_expansion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            tuple(d["stage_channels"]),
            tuple(d["stage_depths"]),
            tuple(d["attention_heads"]),
            tuple(d["reduction_ratios"]),
            int(d["ffn_expansion"]),
        )


def init_transformer_weights(module: nn.Module) -> None:
    """Truncated-normal (std 0.02) projection weights, zero biases."""
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class OverlapPatchEmbed(nn.Module):
    """Strided overlapped patch embedding followed by layer normalization."""

    def __init__(self, in_channels: int, out_channels: int, patch: int, stride: int):
        super().__init__()
        self.stride = stride
        self.proj = nn.Conv2d(in_channels, out_channels, patch, stride=stride, padding=patch // 2)
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        if h % self.stride or w % self.stride:
            raise ShapeMismatch(f"spatial dims {(h, w)} not divisible by stride {self.stride}")
        x = self.proj(x)
        _, c, hh, ww = x.shape
        x = self.norm(x.flatten(2).transpose(1, 2))
        return x.transpose(1, 2).reshape(b, c, hh, ww)


class EfficientSelfAttention(nn.Module):
    """Multi-head self-attention with keys/values on a spatially reduced copy.

    The reduction (factor ``reduction_ratio`` per side) bounds the cost of the
    attention matrix on high-resolution stages. Shape preserving; no residual.
    """

    def __init__(self, channels: int, heads: int, reduction_ratio: int):
        super().__init__()
        if channels % heads:
            raise ShapeMismatch(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (channels // heads) ** -0.5
        self.q = nn.Linear(channels, channels)
        self.kv = nn.Linear(channels, 2 * channels)
        self.proj = nn.Linear(channels, channels)
        self.reduction_ratio = reduction_ratio
        if reduction_ratio > 1:
            self.reduce = nn.Conv2d(channels, channels, reduction_ratio, stride=reduction_ratio)
            self.reduce_norm = nn.LayerNorm(channels)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Return the [B, heads, N, M] attention matrix (rows sum to 1)."""
        probs, _ = self._attend(x)
        return probs

    def _attend(self, x: torch.Tensor):
        b, c, h, w = x.shape
        n = h * w
        tokens = x.flatten(2).transpose(1, 2)  # [B, N, C]
        q = self.q(tokens).reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        if self.reduction_ratio > 1:
            red = self.reduce(x)
            red = red.flatten(2).transpose(1, 2)
            red = self.reduce_norm(red)
        else:
            red = tokens
        m = red.shape[1]
        kv = self.kv(red).reshape(b, m, 2, self.heads, c // self.heads)
        k = kv[:, :, 0].transpose(1, 2)
        v = kv[:, :, 1].transpose(1, 2)
        probs = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        return probs, v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        probs, v = self._attend(x)
        out = (probs @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out)
        return out.transpose(1, 2).reshape(b, c, h, w)


class MixFFN(nn.Module):
    """Feed-forward block with a 3x3 depth-wise convolution; residual inside.

    The depth-wise convolution injects positional information, which is why
    the encoder needs no positional encodings.
    """

    def __init__(self, channels: int, expansion: int):
        super().__init__()
        hidden = channels * expansion
        self.norm = nn.LayerNorm(channels)
        self.fc1 = nn.Linear(channels, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x.flatten(2).transpose(1, 2))
        y = self.fc1(tokens)
        y = y.transpose(1, 2).reshape(b, -1, h, w)
        y = self.dwconv(y)
        y = F.gelu(y.flatten(2).transpose(1, 2))
        y = self.fc2(y)
        return x + y.transpose(1, 2).reshape(b, c, h, w)


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, heads: int, reduction_ratio: int, expansion: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = EfficientSelfAttention(channels, heads, reduction_ratio)
        self.ffn = MixFFN(channels, expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x.flatten(2).transpose(1, 2))
        normed = tokens.transpose(1, 2).reshape(b, c, h, w)
        x = x + self.attn(normed)
        return self.ffn(x)


class EncoderStage(nn.Module):
    """Patch embedding plus a stack of transformer blocks and a final norm."""

    def __init__(self, in_channels: int, channels: int, depth: int, heads: int,
                 reduction_ratio: int, expansion: int, patch: int, stride: int):
        super().__init__()
        self.embed = OverlapPatchEmbed(in_channels, channels, patch, stride)
        self.blocks = nn.ModuleList(
            TransformerBlock(channels, heads, reduction_ratio, expansion) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.embed(x)
        for block in self.blocks:
            x = block(x)
        b, c, h, w = x.shape
        tokens = self.norm(x.flatten(2).transpose(1, 2))
        return tokens.transpose(1, 2).reshape(b, c, h, w)


def make_stage(cfg: EncoderConfig, index: int, in_channels: int) -> EncoderStage:
    patch, stride = (7, 4) if index == 0 else (3, 2)
    return EncoderStage(
        in_channels,
        cfg.stage_channels[index],
        cfg.stage_depths[index],
        cfg.attention_heads[index],
        cfg.reduction_ratios[index],
        cfg.ffn_expansion,
        patch,
        stride,
    )


class HierarchicalEncoder(nn.Module):
    """Four cascaded stages yielding features at 1/4, 1/8, 1/16 and 1/32 scale."""

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        stages = []
        in_channels = 3
        for i in range(4):
            stages.append(make_stage(self.cfg, i, in_channels))
            in_channels = self.cfg.stage_channels[i]
        self.stages = nn.ModuleList(stages)
        self.apply(init_transformer_weights)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected [B, 3, H, W] input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % PAD_MULTIPLE or w % PAD_MULTIPLE:
            raise ShapeMismatch(f"input dims {(h, w)} must be multiples of {PAD_MULTIPLE}")
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


def import_backbone_weights(encoder: HierarchicalEncoder, path) -> dict:
    """Copy matching arrays from a flat name->array checkpoint into ``encoder``.

    Keys may carry an ``encoder.`` prefix; it is stripped. Missing file or
    missing keys are tolerated (pre-trained weights are optional). Returns a
    report with loaded/missing/unexpected key lists.
    """
    from .checkpoint import load_checkpoint

    arrays, _ = load_checkpoint(path)
    state = encoder.state_dict()
    loaded, unexpected = [], []
    for name, value in arrays.items():
        key = name.removeprefix("encoder.")
        if key in state and tuple(state[key].shape) == tuple(value.shape):
            state[key] = torch.from_numpy(value.copy())
            loaded.append(key)
        else:
            unexpected.append(name)
    encoder.load_state_dict(state)
    missing = sorted(set(encoder.state_dict().keys()) - set(loaded))
    return {"loaded": sorted(loaded), "missing": missing, "unexpected": sorted(unexpected)}
