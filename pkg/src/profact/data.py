"""Core array types, validation, padding and image/mask file I/O.

Conventions used throughout the package:

* Image: float32 array [H, W, 3], RGB, values in [0, 1].
* BinaryMask: uint8 array [H, W] with values in {0, 1} (1 = forged pixel).
* ProbMap: float32 array [H, W] with values in [0, 1].

8-bit files are divided by 255 on load; masks are stored as single-channel
PNG with {0, 255} and thresholded at 128 on load. Arrays returned by the
loaders are marked read-only and safe to share across workers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import ShapeMismatch, ValueOutOfRange

PAD_MULTIPLE = 32

FLIP_MODES = ("none", "horizontal", "vertical", "both")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def validate_image(image: np.ndarray) -> None:
    """Check that ``image`` is a well-formed [H, W, 3] float image in [0, 1]."""
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"expected [H, W, 3] image, got shape {getattr(image, 'shape', None)}")
    if image.dtype.kind != "f":
        raise ValueOutOfRange(f"image must be floating point, got dtype {image.dtype}")
    if not np.isfinite(image).all():
        raise ValueOutOfRange("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueOutOfRange(
            f"image values outside [0, 1]: min={image.min():.4f} max={image.max():.4f}"
        )


def validate_mask(mask: np.ndarray) -> None:
    """Check that ``mask`` is a 2-D array with values exactly in {0, 1}."""
    if not isinstance(mask, np.ndarray) or mask.ndim != 2:
        raise ShapeMismatch(f"expected [H, W] mask, got shape {getattr(mask, 'shape', None)}")
    values = np.unique(mask)
    if not np.isin(values, (0, 1)).all():
        raise ValueOutOfRange(f"mask values must be exactly binary, found {values[:8]}")


def validate_prob_map(probs: np.ndarray) -> None:
    if not isinstance(probs, np.ndarray) or probs.ndim != 2:
        raise ShapeMismatch(f"expected [H, W] probability map, got shape {getattr(probs, 'shape', None)}")
    if not np.isfinite(probs).all():
        raise ValueOutOfRange("probability map contains non-finite values")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ValueOutOfRange("probability map values outside [0, 1]")


def validate_pair(image: np.ndarray, mask: np.ndarray) -> None:
    """Validate an (image, mask) pair: shapes must match, ranges must hold."""
    validate_image(image)
    validate_mask(mask)
    if image.shape[:2] != mask.shape:
        raise ShapeMismatch(f"image {image.shape[:2]} and mask {mask.shape} sizes differ")


def pad_to_multiple(image: np.ndarray, m: int = PAD_MULTIPLE) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad ``image`` so both spatial dims are multiples of ``m``.

    Returns the padded array and the original (H, W) so predictions can be
    cropped back. Symmetric reflection is used so that 1-pixel inputs pad
    cleanly. Works on [H, W] and [H, W, C] arrays.
    """
    if m != PAD_MULTIPLE:
        raise ValueOutOfRange(f"padding multiple must be {PAD_MULTIPLE}, got {m}")
    if image.ndim not in (2, 3):
        raise ShapeMismatch(f"expected 2-D or 3-D array, got shape {image.shape}")
    h, w = image.shape[:2]
    ph = (m - h % m) % m
    pw = (m - w % m) % m
    if ph == 0 and pw == 0:
        return image, (h, w)
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="symmetric"), (h, w)


def crop_back(arr: np.ndarray, original_size: tuple[int, int]) -> np.ndarray:
    """Crop a padded array back to the recorded original size."""
    h, w = original_size
    if arr.shape[0] < h or arr.shape[1] < w:
        raise ShapeMismatch(f"cannot crop {arr.shape[:2]} back to {(h, w)}")
    return arr[:h, :w, ...]


# ---------------------------------------------------------------------------
# File I/O

def load_image(path: str | Path) -> np.ndarray:
    """Load a PNG/JPEG file as a float32 RGB image in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise FileNotFoundError(f"cannot read image file: {path}")
    image = raw[:, :, ::-1].astype(np.float32) / 255.0
    return _freeze(image)


def save_image(path: str | Path, image: np.ndarray, jpeg_quality: int = 95) -> None:
    """Write a float [0, 1] RGB image as 8-bit PNG or JPEG (by extension)."""
    validate_image(image)
    bgr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)[:, :, ::-1]
    params = []
    if str(path).lower().endswith((".jpg", ".jpeg")):
        params = [cv2.IMWRITE_JPEG_QUALITY, int(jpeg_quality)]
    if not cv2.imwrite(str(path), bgr, params):
        raise IOError(f"failed to write image: {path}")


def load_mask(path: str | Path) -> np.ndarray:
    """Load a ground-truth mask PNG; values >= 128 map to 1, the rest to 0."""
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise FileNotFoundError(f"cannot read mask file: {path}")
    return _freeze((raw >= 128).astype(np.uint8))


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a {0, 1} mask as a single-channel PNG with {0, 255}."""
    validate_mask(mask)
    if not cv2.imwrite(str(path), (mask.astype(np.uint8) * 255)):
        raise IOError(f"failed to write mask: {path}")


def save_prob_map(path: str | Path, probs: np.ndarray) -> None:
    """Write a probability map as lossless 8-bit grayscale PNG (prob * 255, rounded)."""
    validate_prob_map(probs)
    gray = (probs * 255.0).round().astype(np.uint8)
    if not cv2.imwrite(str(path), gray):
        raise IOError(f"failed to write probability map: {path}")


def load_prob_map(path: str | Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise FileNotFoundError(f"cannot read probability map: {path}")
    return _freeze(raw.astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# Forged-sample records

@dataclass(frozen=True)
class ManipulationParams:
    """Parameters of the geometric transform chain applied to a foreground.

    Ranges: scale and the two deformation factors in [0.5, 2.0], rotation in
    [-180, 180] degrees, flip one of FLIP_MODES. ``applied`` records which of
    the four operations were actually drawn for this sample.
    """

    scale: float = 1.0
    rotation_deg: float = 0.0
    flip: str = "none"
    deform: tuple[float, float] = (1.0, 1.0)
    applied: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation_deg": self.rotation_deg,
            "flip": self.flip,
            "deform": list(self.deform),
            "applied": list(self.applied),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManipulationParams":
        return cls(
            scale=float(d["scale"]),
            rotation_deg=float(d["rotation_deg"]),
            flip=str(d["flip"]),
            deform=(float(d["deform"][0]), float(d["deform"][1])),
            applied=tuple(d["applied"]),
        )


MASK_AREA_MIN = 0.005
MASK_AREA_MAX = 0.5


@dataclass(frozen=True)
class ForgerySample:
    """A composite image, its ground-truth mask and generation metadata."""

    image: np.ndarray
    mask: np.ndarray
    mode: str  # "splice" or "copymove"
    seed: int
    params: ManipulationParams
    provenance: dict = field(default_factory=dict)
    harmonize_strength: float | None = None

    def __post_init__(self):
        self.image.flags.writeable = False
        self.mask.flags.writeable = False

    @property
    def area_ratio(self) -> float:
        return float(self.mask.sum()) / float(self.mask.shape[0] * self.mask.shape[1])

    def validate(self) -> None:
        validate_pair(self.image, self.mask)
        if self.mask.sum() == 0:
            raise ValueOutOfRange("forged-sample mask is empty")
        ratio = self.area_ratio
        if not (MASK_AREA_MIN <= ratio <= MASK_AREA_MAX):
            raise ValueOutOfRange(f"mask area ratio {ratio:.4f} outside [{MASK_AREA_MIN}, {MASK_AREA_MAX}]")

    def meta_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": int(self.seed),
            "params": self.params.to_dict(),
            "harmonize_strength": self.harmonize_strength,
            "provenance": self.provenance,
        }


def write_sample(sample: ForgerySample, image_path: Path, mask_path: Path, meta_path: Path) -> None:
    """Write composite PNG, mask PNG and the JSON metadata sidecar."""
    save_image(image_path, sample.image)
    save_mask(mask_path, sample.mask)
    meta_path.write_text(json.dumps(sample.meta_dict(), indent=2, sort_keys=True) + "\n")


def read_sample_meta(meta_path: str | Path) -> dict:
    return json.loads(Path(meta_path).read_text())
