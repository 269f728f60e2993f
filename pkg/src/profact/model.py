"""Two-branch forgery localization network with coarse-map feedback.

The coarse branch encodes the image with the hierarchical transformer,
enhances every level with a context/pyramid module and decodes a coarse
probability map. A holistic-attention operator widens that map and gates the
enhanced stage-2 feature; two fresh transformer stages re-encode the gated
feature and a second decoder produces the refined map. Both maps are
supervised during training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .context_pyramid import ContextSpatialPyramid, CspmConfig
from .data import PAD_MULTIPLE, crop_back, pad_to_multiple, validate_image
from .decoder import FusionDecoder, predict_map, upsample_bilinear
from .encoder import EncoderConfig, HierarchicalEncoder, init_transformer_weights, make_stage
from .errors import ShapeMismatch


@dataclass(frozen=True)
class HamConfig:
    """Holistic attention settings: fixed 3/2/1 strided downsample, Gaussian widen."""

    gaussian_kernel_size: int = 7
    gaussian_sigma: float = 1.0
    down_kernel: int = 3
    down_stride: int = 2
    down_padding: int = 1

    def __post_init__(self):
        if self.gaussian_kernel_size % 2 == 0 or self.gaussian_kernel_size <= 0:
            raise ValueError("gaussian kernel size must be odd and positive")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian sigma must be positive")

    @classmethod
    def full(cls) -> "HamConfig":
        return cls(gaussian_kernel_size=31, gaussian_sigma=4.0)

    def to_dict(self) -> dict:
        return {
            "gaussian_kernel_size": self.gaussian_kernel_size,
            "gaussian_sigma": self.gaussian_sigma,
            "down_kernel": self.down_kernel,
            "down_stride": self.down_stride,
            "down_padding": self.down_padding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HamConfig":
        return cls(
            int(d["gaussian_kernel_size"]),
            float(d["gaussian_sigma"]),
            int(d["down_kernel"]),
            int(d["down_stride"]),
            int(d["down_padding"]),
        )


def gaussian_kernel_2d(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    """Normalized 2-D Gaussian kernel of odd ``size``."""
    half = size // 2
    coords = torch.arange(size, dtype=dtype) - half
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = g[:, None] * g[None, :]
    return kernel / kernel.sum()


class HolisticAttention(nn.Module):
    """Widen a coarse probability map before it gates the stage-2 feature.

    The map is downsampled by a learned stride-2 3x3 convolution (initialized
    to a plain averaging kernel), blurred by a fixed Gaussian with zero bias,
    rescaled to [0, 1] by its per-sample maximum (left unchanged when the
    maximum is zero), and combined with the downsampled map through an
    element-wise maximum, so the output never falls below the downsampled map.
    """

    def __init__(self, cfg: HamConfig | None = None):
        super().__init__()
        self.cfg = cfg or HamConfig()
        c = self.cfg
        self.downsample = nn.Conv2d(1, 1, c.down_kernel, stride=c.down_stride, padding=c.down_padding)
        with torch.no_grad():
            self.downsample.weight.fill_(1.0 / (c.down_kernel * c.down_kernel))
            self.downsample.bias.zero_()
        kernel = gaussian_kernel_2d(c.gaussian_kernel_size, c.gaussian_sigma)
        self.register_buffer("gaussian", kernel[None, None])

    def forward(self, coarse: torch.Tensor) -> torch.Tensor:
        if coarse.ndim != 4 or coarse.shape[1] != 1:
            raise ShapeMismatch(f"expected [B, 1, H, W] map, got {tuple(coarse.shape)}")
        down = self.downsample(coarse)
        blurred = F.conv2d(down, self.gaussian, padding=self.cfg.gaussian_kernel_size // 2)
        peak = blurred.amax(dim=(2, 3), keepdim=True)
        normed = torch.where(peak > 1e-12, blurred / peak.clamp(min=1e-12), blurred)
        return torch.maximum(normed, down)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    cspm: CspmConfig
    ham: HamConfig
    decoder_channels: int = 64

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Default small-scale configuration that runs comfortably on CPU."""
        return cls(EncoderConfig(), CspmConfig(), HamConfig(), decoder_channels=64)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Smallest configuration, intended for tests."""
        return cls(EncoderConfig.tiny(), CspmConfig(), HamConfig(), decoder_channels=32)

    @classmethod
    def full(cls) -> "ModelConfig":
        """Full-scale configuration (MiT-B3 backbone, 256-channel decoder)."""
        return cls(EncoderConfig.full(), CspmConfig(), HamConfig.full(), decoder_channels=256)

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "cspm": self.cspm.to_dict(),
            "ham": self.ham.to_dict(),
            "decoder_channels": self.decoder_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            EncoderConfig.from_dict(d["encoder"]),
            CspmConfig.from_dict(d["cspm"]),
            HamConfig.from_dict(d["ham"]),
            int(d["decoder_channels"]),
        )


class ForgeryLocalizer(nn.Module):
    """End-to-end coarse + refined tampering-map predictor."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig.desk()
        channels = self.cfg.encoder.stage_channels
        self.encoder = HierarchicalEncoder(self.cfg.encoder)
        self.coarse_enhance = nn.ModuleList(
            ContextSpatialPyramid(c, self.cfg.cspm) for c in channels
        )
        self.coarse_decoder = FusionDecoder(channels, self.cfg.decoder_channels)
        self.attention = HolisticAttention(self.cfg.ham)
        # Fresh stage-3/4 style blocks for the refinement pass; weights are
        # disjoint from the coarse encoder stages.
        self.refine_stage3 = make_stage(self.cfg.encoder, 2, channels[1])
        self.refine_stage4 = make_stage(self.cfg.encoder, 3, channels[2])
        self.refine_enhance = nn.ModuleList(
            ContextSpatialPyramid(c, self.cfg.cspm) for c in channels[1:]
        )
        self.refine_decoder = FusionDecoder(channels[1:], self.cfg.decoder_channels)
        for module in (self.refine_stage3, self.refine_stage4):
            module.apply(init_transformer_weights)

    def feedback_fuse(self, coarse: torch.Tensor, stage2: torch.Tensor) -> torch.Tensor:
        """Gate the enhanced stage-2 feature with the widened coarse map."""
        gate = self.attention(coarse)
        gate = upsample_bilinear(gate, stage2.shape[-2:])
        return gate * stage2

    def refine(self, fused: torch.Tensor, out_hw: tuple[int, int]):
        """Re-encode the gated stage-2 feature and decode the refined map.

        Returns (stage3 feature, stage4 feature, refined probability map).
        """
        feat3 = self.refine_stage3(fused)
        feat4 = self.refine_stage4(feat3)
        enhanced = [
            self.refine_enhance[0](fused),
            self.refine_enhance[1](feat3),
            self.refine_enhance[2](feat4),
        ]
        target_hw = (out_hw[0] // 4, out_hw[1] // 4)
        logits = self.refine_decoder(enhanced, target_hw)
        return feat3, feat4, predict_map(logits, out_hw)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected [B, 3, H, W], got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % PAD_MULTIPLE or w % PAD_MULTIPLE:
            raise ShapeMismatch(f"input dims {(h, w)} must be multiples of {PAD_MULTIPLE}")
        features = self.encoder(x)
        enhanced = [enhance(f) for enhance, f in zip(self.coarse_enhance, features)]
        logits = self.coarse_decoder(enhanced, (h // 4, w // 4))
        coarse = predict_map(logits, (h, w))
        fused = self.feedback_fuse(coarse, enhanced[1])
        _, _, refined = self.refine(fused, (h, w))
        return coarse, refined

    @torch.no_grad()
    def predict(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Run a single [H, W, 3] float image; returns (coarse, refined) maps.

        The image is reflect-padded to a multiple of 32 and the maps are
        cropped back to the original size.
        """
        validate_image(image)
        was_training = self.training
        self.eval()
        try:
            padded, original = pad_to_multiple(image)
            x = torch.from_numpy(np.ascontiguousarray(padded.transpose(2, 0, 1)))[None]
            x = x.to(dtype=next(self.parameters()).dtype, device=next(self.parameters()).device)
            coarse, refined = self(x)
            coarse_map = crop_back(coarse[0, 0].cpu().numpy().astype(np.float32), original)
            refined_map = crop_back(refined[0, 0].cpu().numpy().astype(np.float32), original)
            return coarse_map, refined_map
        finally:
            if was_training:
                self.train()
