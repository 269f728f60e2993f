"""Lightweight multi-level MLP fusion decoder.

Each input level is projected to a common channel width by a per-pixel linear
layer and bilinearly upsampled to the 1/4-scale grid; the unified levels are
concatenated and squeezed to a single-channel logit map by two consecutive
per-pixel linear layers (with a GELU between them, so they do not collapse
into one linear map). A parameter-free bilinear upsampling plus sigmoid turns
the logits into a full-resolution probability map.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch


def upsample_bilinear(x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == tuple(hw):
        return x
    return F.interpolate(x, size=hw, mode="bilinear", align_corners=False)


def predict_map(logits: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsample a single-channel logit map and apply sigmoid."""
    if logits.ndim != 4 or logits.shape[1] != 1:
        raise ShapeMismatch(f"expected [B, 1, h, w] logits, got {tuple(logits.shape)}")
    return torch.sigmoid(upsample_bilinear(logits, out_hw))


class FusionDecoder(nn.Module):
    """Fuse a list of feature levels into one logit map at the target grid.

    The coarse and refined branches each own an instance; they share the
    structure and differ only in level count and weights.
    """

    def __init__(self, in_channels: tuple[int, ...], channels: int = 64):
        super().__init__()
        self.channels = channels
        self.projections = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.fuse_hidden = nn.Conv2d(len(in_channels) * channels, channels, 1)
        self.fuse_out = nn.Conv2d(channels, 1, 1)

    def unify_level(self, index: int, feature: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
        """Project level ``index`` to the common width and resample to ``target_hw``."""
        if feature.shape[1] != self.projections[index].in_channels:
            raise ShapeMismatch(
                f"level {index} has {feature.shape[1]} channels, "
                f"expected {self.projections[index].in_channels}"
            )
        return upsample_bilinear(self.projections[index](feature), target_hw)

    def fuse(self, levels: list[torch.Tensor]) -> torch.Tensor:
        """Concatenate unified levels and squeeze to a 1-channel logit map."""
        if len(levels) != len(self.projections):
            raise ShapeMismatch(f"expected {len(self.projections)} levels, got {len(levels)}")
        shape = levels[0].shape
        for lv in levels[1:]:
            if lv.shape != shape:
                raise ShapeMismatch(f"unified levels disagree in shape: {lv.shape} vs {shape}")
        x = torch.cat(levels, dim=1)
        return self.fuse_out(F.gelu(self.fuse_hidden(x)))

    def forward(self, features: list[torch.Tensor], target_hw: tuple[int, int]) -> torch.Tensor:
        unified = [self.unify_level(i, f, target_hw) for i, f in enumerate(features)]
        return self.fuse(unified)
