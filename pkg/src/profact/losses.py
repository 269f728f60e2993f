"""Training objective: focal loss, dice loss and their per-branch combination.

Focal puts more weight on hard pixels and counters the pristine/forged class
imbalance; dice directly optimizes region overlap. Both operate on probability
maps (post-sigmoid). Focal is reduced by per-pixel mean so that magnitudes do
not depend on image size; dice is a ratio and needs no reduction choice.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeMismatch


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5      # focal/dice mixing weight
    alpha: float = 0.5    # focal class weight
    gamma: float = 2.0    # focal focusing exponent
    epsilon: float = 1e-6

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0 and 0.0 <= self.alpha <= 1.0):
            raise ValueError("lam and alpha must lie in [0, 1]")
        if self.gamma < 0 or self.epsilon <= 0:
            raise ValueError("gamma must be >= 0 and epsilon > 0")


def _check_shapes(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")


def focal_loss(pred: torch.Tensor, target: torch.Tensor,
               alpha: float = 0.5, gamma: float = 2.0, epsilon: float = 1e-6) -> torch.Tensor:
    """Mean per-pixel focal loss between a probability map and a {0,1} target."""
    _check_shapes(pred, target)
    p = pred.clamp(epsilon, 1.0 - epsilon)
    t = target.to(p.dtype)
    pos = alpha * (1.0 - p) ** gamma * t * torch.log(p)
    neg = (1.0 - alpha) * p**gamma * (1.0 - t) * torch.log(1.0 - p)
    return -(pos + neg).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    """1 - 2|pred * gt| / (|pred| + |gt|), stabilized so empty/empty -> 0."""
    _check_shapes(pred, target)
    t = target.to(pred.dtype)
    intersection = (pred * t).sum()
    total = (pred + t).sum()
    return 1.0 - (2.0 * intersection + epsilon) / (total + epsilon)


def combined_loss(pred: torch.Tensor, target: torch.Tensor,
                  cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return cfg.lam * focal_loss(pred, target, cfg.alpha, cfg.gamma, cfg.epsilon) + (
        1.0 - cfg.lam
    ) * dice_loss(pred, target, cfg.epsilon)


def total_loss(coarse: torch.Tensor, refined: torch.Tensor, target: torch.Tensor,
               cfg: LossConfig | None = None) -> torch.Tensor:
    """Sum of the combined losses of the coarse and refined branches."""
    cfg = cfg or LossConfig()
    return combined_loss(coarse, target, cfg) + combined_loss(refined, target, cfg)
