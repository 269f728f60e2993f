"""Coarse-to-fine image forgery localization toolkit.

Library surface: domain types and I/O (`data`), the two-branch localizer and
its building blocks (`encoder`, `context_pyramid`, `decoder`, `model`), the
training objective (`losses`), pixel-level evaluation (`metrics`), the
realistic forged-sample generator (`synth`), augmentation and robustness
perturbations (`augment`), the two-stage trainer (`train`), checkpoints
(`checkpoint`) and the CLI (`cli`).
"""

from .model import ForgeryLocalizer, ModelConfig

__version__ = "0.1.0"

__all__ = ["ForgeryLocalizer", "ModelConfig", "__version__"]
