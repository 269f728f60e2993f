"""Training-time augmentation and test-time robustness perturbations.

Training samples are randomly resized, cropped to the stage's fixed block size
under a forged-area constraint, horizontally flipped and JPEG-recompressed.
The perturbation grid (JPEG quality, Gaussian blur, Gaussian noise, resizing)
drives the robustness sweeps of the evaluation harness; every primitive is
deterministic given its parameters and noise seed.
"""
from __future__ import annotations

import numpy as np
import cv2

from .data import ForgerySample, validate_image
from .errors import CropInfeasible, ParamOutOfRange, UnknownKind

STAGE_CROP = {1: 512, 2: 1024}
CROP_AREA_MIN = 0.05
CROP_AREA_MAX = 0.75
RESIZE_RANGE = (0.5, 2.0)
JPEG_QUALITY_RANGE = (70, 95)
CROP_TRIES = 50

# Robustness sweep grids. The curves in the source experiments are plotted
# without printed grids; these are the levels this harness sweeps.
PERTURB_GRIDS: dict[str, tuple] = {
    "jpeg": (50, 60, 70, 80, 90, 100),
    "blur": (0.0, 0.5, 1.0, 2.0, 3.0),
    "noise": (0.0, 0.02, 0.05, 0.1),
    "resize": (0.5, 0.75, 1.25, 1.5),
}


def jpeg_recompress(image: np.ndarray, quality: int) -> np.ndarray:
    """Round-trip a float RGB image through the JPEG codec at ``quality``.

    4:4:4 chroma subsampling keeps the Q=100 round trip near-lossless
    (max per-pixel error measured below 0.02).
    """
    if not (1 <= quality <= 100):
        raise ParamOutOfRange(f"JPEG quality {quality} outside [1, 100]")
    bgr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)[:, :, ::-1]
    ok, buf = cv2.imencode(
        ".jpg", bgr,
        [cv2.IMWRITE_JPEG_QUALITY, int(quality),
         cv2.IMWRITE_JPEG_SAMPLING_FACTOR, cv2.IMWRITE_JPEG_SAMPLING_FACTOR_444],
    )
    if not ok:
        raise IOError("JPEG encoding failed")
    decoded = cv2.imdecode(buf, cv2.IMREAD_COLOR)[:, :, ::-1]
    return decoded.astype(np.float32) / 255.0


def _resize_image(image: np.ndarray, factor: float) -> np.ndarray:
    h, w = image.shape[:2]
    size = (max(1, round(w * factor)), max(1, round(h * factor)))
    return np.clip(cv2.resize(image, size, interpolation=cv2.INTER_CUBIC), 0.0, 1.0)


def _resize_mask(mask: np.ndarray, factor: float) -> np.ndarray:
    h, w = mask.shape
    size = (max(1, round(w * factor)), max(1, round(h * factor)))
    return cv2.resize(mask, size, interpolation=cv2.INTER_NEAREST)


def _pad_to(image: np.ndarray, mask: np.ndarray, size: int):
    h, w = mask.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return image, mask
    image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="symmetric")
    mask = np.pad(mask, ((0, ph), (0, pw)), mode="symmetric")
    return image, mask


def train_augment(sample: ForgerySample, stage: int, rng: np.random.Generator,
                  crop_size: int | None = None) -> ForgerySample:
    """Stage-dependent training augmentation of one forged sample.

    Random resize in [0.5, 2.0], fixed-size crop whose forged-area proportion
    lies in [0.05, 0.75] (re-drawn up to CROP_TRIES times, then a crop centered
    on the mask is tried), horizontal flip with probability 0.5, and JPEG
    recompression at quality 70..95 of the image only. The mask follows every
    geometric step. Raises CropInfeasible when even the fallback crop violates
    the area constraint.
    """
    if stage not in STAGE_CROP:
        raise ParamOutOfRange(f"stage must be 1 or 2, got {stage}")
    crop = int(crop_size) if crop_size else STAGE_CROP[stage]

    factor = float(rng.uniform(*RESIZE_RANGE))
    image = _resize_image(sample.image, factor)
    mask = _resize_mask(sample.mask, factor)
    image, mask = _pad_to(image, mask, crop)
    h, w = mask.shape

    crop_area = float(crop * crop)
    top = left = 0
    found = False
    for _ in range(CROP_TRIES):
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        proportion = mask[top:top + crop, left:left + crop].sum() / crop_area
        if CROP_AREA_MIN <= proportion <= CROP_AREA_MAX:
            found = True
            break
    if not found:
        ys, xs = np.nonzero(mask)
        cy, cx = (int(ys.mean()), int(xs.mean())) if len(ys) else (h // 2, w // 2)
        top = min(max(cy - crop // 2, 0), h - crop)
        left = min(max(cx - crop // 2, 0), w - crop)
        proportion = mask[top:top + crop, left:left + crop].sum() / crop_area
        if not (CROP_AREA_MIN <= proportion <= CROP_AREA_MAX):
            raise CropInfeasible(
                f"no {crop}x{crop} crop with forged area in "
                f"[{CROP_AREA_MIN}, {CROP_AREA_MAX}] (centered crop gives {proportion:.4f})"
            )
    image = np.ascontiguousarray(image[top:top + crop, left:left + crop])
    mask = np.ascontiguousarray(mask[top:top + crop, left:left + crop])

    if rng.random() < 0.5:
        image = np.ascontiguousarray(image[:, ::-1])
        mask = np.ascontiguousarray(mask[:, ::-1])

    quality = int(rng.integers(JPEG_QUALITY_RANGE[0], JPEG_QUALITY_RANGE[1] + 1))
    image = jpeg_recompress(image, quality)

    return ForgerySample(
        image=image,
        mask=mask,
        mode=sample.mode,
        seed=sample.seed,
        params=sample.params,
        provenance=sample.provenance,
        harmonize_strength=sample.harmonize_strength,
    )


def perturb(image: np.ndarray, kind: str, level, seed: int = 0) -> np.ndarray:
    """Apply one robustness perturbation; the paired mask stays untouched.

    jpeg: recompress at quality ``level``. blur: Gaussian with sigma
    ``level`` (0 is the identity). noise: additive Gaussian with standard
    deviation ``level`` on the [0, 1] scale, drawn from ``seed``. resize:
    bicubic rescale by factor ``level`` (1.0 is the identity; evaluation
    resamples predictions back to the ground-truth grid).
    """
    validate_image(image)
    if kind == "jpeg":
        return jpeg_recompress(image, int(level))
    if kind == "blur":
        sigma = float(level)
        if sigma < 0:
            raise ParamOutOfRange(f"blur sigma must be >= 0, got {sigma}")
        if sigma == 0.0:
            return image
        ksize = int(2 * round(3 * sigma) + 1)
        return np.clip(cv2.GaussianBlur(image, (ksize, ksize), sigma), 0.0, 1.0)
    if kind == "noise":
        sigma = float(level)
        if sigma < 0:
            raise ParamOutOfRange(f"noise sigma must be >= 0, got {sigma}")
        if sigma == 0.0:
            return image
        rng = np.random.default_rng(seed)
        noisy = image + rng.normal(0.0, sigma, size=image.shape)
        return np.clip(noisy, 0.0, 1.0).astype(np.float32)
    if kind == "resize":
        factor = float(level)
        if factor <= 0:
            raise ParamOutOfRange(f"resize factor must be positive, got {factor}")
        if factor == 1.0:
            return image
        return _resize_image(image, factor)
    raise UnknownKind(f"unknown perturbation kind {kind!r}; expected one of {sorted(PERTURB_GRIDS)}")
