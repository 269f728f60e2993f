"""Realistic forged-sample generation.

Pipeline per sample: build a trimap around the annotated object by disk
erosion/dilation, derive an alpha matte (feathered by default, or loaded from
a precomputed matte directory), push foreground and matte through a random
geometric manipulation chain, place the region on a background under an area
constraint, alpha-blend, and optionally harmonize the inserted region's color
statistics toward the background. Splice mode uses a second image as the
background; copy-move pastes the object back onto its own source image.

Every sample is a deterministic function of its 64-bit seed and the source
identifiers, which makes batch generation reproducible and resumable.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .data import (
    ForgerySample,
    ManipulationParams,
    FLIP_MODES,
    MASK_AREA_MAX,
    MASK_AREA_MIN,
    load_image,
    write_sample,
)
from .errors import (
    DataUnavailable,
    EmptyMask,
    ParamOutOfRange,
    PlacementFailed,
    ShapeMismatch,
)

TRIMAP_BG = 0
TRIMAP_UNKNOWN = 1
TRIMAP_FG = 2


@dataclass(frozen=True)
class Trimap:
    """Three-region map: 0 background, 1 unknown band, 2 foreground."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels.flags.writeable = False

    @property
    def foreground(self) -> np.ndarray:
        return self.labels == TRIMAP_FG

    @property
    def background(self) -> np.ndarray:
        return self.labels == TRIMAP_BG

    @property
    def unknown(self) -> np.ndarray:
        return self.labels == TRIMAP_UNKNOWN


def disk_element(radius: int) -> np.ndarray:
    """Boolean disk structuring element of the given radius."""
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy**2 + xx**2) <= radius**2


def build_trimap(mask: np.ndarray, radius: int) -> Trimap:
    """Erode/dilate the annotation by a disk to carve out the unknown band."""
    if radius < 1:
        raise ParamOutOfRange(f"trimap radius must be >= 1, got {radius}")
    if mask.ndim != 2:
        raise ShapeMismatch(f"expected [H, W] mask, got {mask.shape}")
    binary = mask.astype(bool)
    if not binary.any():
        raise EmptyMask("cannot build a trimap from an empty mask")
    element = disk_element(radius)
    fg = ndimage.binary_erosion(binary, structure=element)
    dilated = ndimage.binary_dilation(binary, structure=element)
    labels = np.full(mask.shape, TRIMAP_BG, dtype=np.uint8)
    labels[dilated] = TRIMAP_UNKNOWN
    labels[fg] = TRIMAP_FG
    return Trimap(labels)


def estimate_alpha(image: np.ndarray, trimap: Trimap, sigma: float = 2.5) -> np.ndarray:
    """Feathered matte: 1 on foreground, 0 on background, Gaussian falloff between.

    The falloff follows the Euclidean distance from the foreground region, so
    alpha is monotone non-increasing along any outward path through the
    unknown band. ``image`` is accepted for interface parity with learned
    matting backends but is not used by this default estimator. Precomputed
    mattes can be substituted via ``load_matte``.
    """
    del image  # default estimator is purely geometric
    fg = trimap.foreground
    bg = trimap.background
    alpha = np.zeros(trimap.labels.shape, dtype=np.float32)
    alpha[fg] = 1.0
    unknown = trimap.unknown
    if unknown.any():
        if fg.any():
            dist = ndimage.distance_transform_edt(~fg)
            falloff = np.exp(-(dist**2) / (2.0 * sigma**2))
        else:
            # Object eroded away entirely (tiny annotations): feather from the
            # background inward instead so the band still carries opacity.
            dist = ndimage.distance_transform_edt(~bg)
            falloff = 1.0 - np.exp(-(dist**2) / (2.0 * sigma**2))
        alpha[unknown] = falloff[unknown].astype(np.float32)
    return alpha


def load_matte(path: str | Path) -> np.ndarray:
    """Load an externally computed matte (8-bit grayscale PNG, divided by 255)."""
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise FileNotFoundError(f"cannot read matte file: {path}")
    return raw.astype(np.float32) / 255.0


def clamp_to_trimap(alpha: np.ndarray, trimap: Trimap) -> np.ndarray:
    """Force the matte to 1 on trimap foreground and 0 on background."""
    out = alpha.astype(np.float32).copy()
    out[trimap.foreground] = 1.0
    out[trimap.background] = 0.0
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Manipulation chain

def _resize_pair(fg: np.ndarray, alpha: np.ndarray, width: int, height: int):
    width = max(1, width)
    height = max(1, height)
    fg2 = cv2.resize(fg, (width, height), interpolation=cv2.INTER_CUBIC)
    alpha2 = cv2.resize(alpha, (width, height), interpolation=cv2.INTER_CUBIC)
    return fg2, alpha2


def _rotate_pair(fg: np.ndarray, alpha: np.ndarray, degrees: float):
    h, w = alpha.shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    matrix = cv2.getRotationMatrix2D(center, degrees, 1.0)
    cos = abs(matrix[0, 0])
    sin = abs(matrix[0, 1])
    out_w = int(math.ceil(w * cos + h * sin))
    out_h = int(math.ceil(w * sin + h * cos))
    matrix[0, 2] += (out_w - 1) / 2.0 - center[0]
    matrix[1, 2] += (out_h - 1) / 2.0 - center[1]
    fg2 = cv2.warpAffine(fg, matrix, (out_w, out_h), flags=cv2.INTER_CUBIC,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    alpha2 = cv2.warpAffine(alpha, matrix, (out_w, out_h), flags=cv2.INTER_CUBIC,
                            borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return fg2, alpha2


def _flip_pair(fg: np.ndarray, alpha: np.ndarray, mode: str):
    axes = {"horizontal": 1, "vertical": 0}
    if mode == "both":
        return np.ascontiguousarray(fg[::-1, ::-1]), np.ascontiguousarray(alpha[::-1, ::-1])
    ax = axes[mode]
    return np.ascontiguousarray(np.flip(fg, axis=ax)), np.ascontiguousarray(np.flip(alpha, axis=ax))


def validate_manipulation_params(params: ManipulationParams) -> None:
    if not (0.5 <= params.scale <= 2.0):
        raise ParamOutOfRange(f"scale {params.scale} outside [0.5, 2.0]")
    if not (-180.0 <= params.rotation_deg <= 180.0):
        raise ParamOutOfRange(f"rotation {params.rotation_deg} outside [-180, 180]")
    if params.flip not in FLIP_MODES:
        raise ParamOutOfRange(f"flip mode {params.flip!r} not one of {FLIP_MODES}")
    for factor in params.deform:
        if not (0.5 <= factor <= 2.0):
            raise ParamOutOfRange(f"deformation factor {factor} outside [0.5, 2.0]")


def apply_manipulation_chain(fg: np.ndarray, alpha: np.ndarray,
                             params: ManipulationParams):
    """Apply scaling, rotation, flipping and anisotropic deformation.

    Color and alpha are transformed identically with bicubic interpolation;
    identity-valued operations are skipped so identity parameters return the
    inputs bit-equal. Alpha is clamped back to [0, 1] after interpolation.
    """
    validate_manipulation_params(params)
    if fg.shape[:2] != alpha.shape:
        raise ShapeMismatch(f"foreground {fg.shape[:2]} vs alpha {alpha.shape}")
    touched = False
    if params.scale != 1.0:
        h, w = alpha.shape
        fg, alpha = _resize_pair(fg, alpha, round(w * params.scale), round(h * params.scale))
        touched = True
    if params.rotation_deg != 0.0:
        fg, alpha = _rotate_pair(fg, alpha, params.rotation_deg)
        touched = True
    if params.flip != "none":
        fg, alpha = _flip_pair(fg, alpha, params.flip)
        touched = True
    if params.deform != (1.0, 1.0):
        sx, sy = params.deform
        h, w = alpha.shape
        fg, alpha = _resize_pair(fg, alpha, round(w * sx), round(h * sy))
        touched = True
    if touched:
        fg = np.clip(fg, 0.0, 1.0)
        alpha = np.clip(alpha, 0.0, 1.0)
    return fg, alpha


def sample_manipulation_params(rng: np.random.Generator, op_prob: float = 0.5) -> ManipulationParams:
    """Draw a random chain; each of the four operations joins independently."""
    use = rng.random(4) < op_prob
    scale = float(rng.uniform(0.5, 2.0)) if use[0] else 1.0
    rotation = float(rng.uniform(-180.0, 180.0)) if use[1] else 0.0
    flip = str(rng.choice(("horizontal", "vertical", "both"))) if use[2] else "none"
    deform = (float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0))) if use[3] else (1.0, 1.0)
    applied = tuple(
        name for name, flag in zip(("scale", "rotation", "flip", "deform"), use) if flag
    )
    return ManipulationParams(scale, rotation, flip, deform, applied)


# ---------------------------------------------------------------------------
# Placement and compositing

@dataclass(frozen=True)
class Placement:
    top: int
    left: int
    scale: float        # extra rescale applied to satisfy the area constraint
    area_ratio: float   # mask (alpha > 0.5) area over the background area
    alpha: np.ndarray   # the matte actually placed (rescaled when scale != 1)


def _rescale_alpha(alpha: np.ndarray, scale: float) -> np.ndarray:
    h, w = alpha.shape
    out = cv2.resize(alpha, (max(1, round(w * scale)), max(1, round(h * scale))),
                     interpolation=cv2.INTER_CUBIC)
    return np.clip(out, 0.0, 1.0)


def support_bbox(alpha: np.ndarray):
    """Bounding box (top, bottom, left, right, exclusive ends) of alpha > 0."""
    support = alpha > 0
    if not support.any():
        return None
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def place_region(alpha: np.ndarray, bg_hw: tuple[int, int], rng: np.random.Generator,
                 min_area: float = MASK_AREA_MIN, max_area: float = MASK_AREA_MAX,
                 offset_tries: int = 10, max_rescales: int = 5,
                 rescale_factor: float = 0.8) -> Placement:
    """Pick a paste offset so the pasted region obeys the area constraint.

    The matte support must cover at most ``max_area`` of the background and
    the derived mask (alpha > 0.5) at least ``min_area``. When a bound is
    violated the foreground is rescaled (down by ``rescale_factor`` when too
    large, up by its inverse when too small) and placement retried, up to
    ``max_rescales`` times before giving up.
    """
    if not (alpha > 0).any():
        raise PlacementFailed("foreground matte has empty support")
    bg_h, bg_w = bg_hw
    bg_pixels = float(bg_h * bg_w)
    scale = 1.0
    for _ in range(max_rescales + 1):
        current = alpha if scale == 1.0 else _rescale_alpha(alpha, scale)
        h, w = current.shape
        support_ratio = float((current > 0).sum()) / bg_pixels
        mask_ratio = float((current > 0.5).sum()) / bg_pixels
        too_large = h > bg_h or w > bg_w or support_ratio > max_area
        too_small = mask_ratio < min_area
        if not too_large and not too_small:
            for _ in range(offset_tries):
                top = int(rng.integers(0, bg_h - h + 1))
                left = int(rng.integers(0, bg_w - w + 1))
                return Placement(top, left, scale, mask_ratio, current)
        scale = scale * rescale_factor if too_large else scale / rescale_factor
    raise PlacementFailed(
        f"no placement satisfying area in [{min_area}, {max_area}] "
        f"after {max_rescales} rescales"
    )


def alpha_blend(fg: np.ndarray, alpha: np.ndarray, bg: np.ndarray,
                offset: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Composite ``alpha * fg + (1 - alpha) * bg`` at ``offset`` (top, left).

    Returns the composite and the ground-truth mask (alpha > 0.5 pasted at the
    offset). Pixels with zero alpha reproduce the background bit-exactly.
    """
    if fg.shape[:2] != alpha.shape:
        raise ShapeMismatch(f"foreground {fg.shape[:2]} vs alpha {alpha.shape}")
    top, left = offset
    h, w = alpha.shape
    if top < 0 or left < 0 or top + h > bg.shape[0] or left + w > bg.shape[1]:
        raise ShapeMismatch(
            f"paste region {(top, left, h, w)} exceeds background {bg.shape[:2]}"
        )
    composite = bg.astype(np.float32)  # astype copies, so the paste never aliases bg
    region = composite[top:top + h, left:left + w]
    a = alpha[..., None].astype(np.float32)
    composite[top:top + h, left:left + w] = a * fg.astype(np.float32) + (1.0 - a) * region
    mask = np.zeros(bg.shape[:2], dtype=np.uint8)
    mask[top:top + h, left:left + w] = (alpha > 0.5).astype(np.uint8)
    return composite, mask


# ---------------------------------------------------------------------------
# Color harmonization in a decorrelated opponent space

_RGB2LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LOG2OPP = np.diag([1.0 / math.sqrt(3), 1.0 / math.sqrt(6), 1.0 / math.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
_OPP2LOG = np.linalg.inv(_LOG2OPP)
_LOG_SHIFT = 1e-4


def rgb_to_opponent(rgb: np.ndarray) -> np.ndarray:
    """RGB -> log-LMS opponent channels (light/dark, yellow-blue, red-green)."""
    lms = rgb.astype(np.float64) @ _RGB2LMS.T
    return np.log10(lms + _LOG_SHIFT) @ _LOG2OPP.T


def opponent_to_rgb(opp: np.ndarray) -> np.ndarray:
    log_lms = opp @ _OPP2LOG.T
    lms = np.maximum(10.0**log_lms - _LOG_SHIFT, 0.0)
    return np.clip(lms @ _LMS2RGB.T, 0.0, 1.0)


def harmonize(composite: np.ndarray, mask: np.ndarray, bg: np.ndarray,
              strength: float) -> np.ndarray:
    """Shift masked-region color statistics toward the background's.

    Per-channel mean and standard deviation in the opponent space are moved
    toward the background values by ``strength`` in [0, 1]; pixels outside the
    mask are returned exactly unchanged. Strength 0 is the identity.
    """
    if not (0.0 <= strength <= 1.0):
        raise ParamOutOfRange(f"harmonization strength {strength} outside [0, 1]")
    region = mask.astype(bool)
    if not region.any():
        raise EmptyMask("harmonization requires a nonempty mask")
    if composite.shape[:2] != mask.shape:
        raise ShapeMismatch(f"composite {composite.shape[:2]} vs mask {mask.shape}")
    if strength == 0.0:
        return composite
    opp = rgb_to_opponent(composite)
    opp_bg = rgb_to_opponent(bg)
    values = opp[region]
    for ch in range(3):
        mu_f = values[:, ch].mean()
        sd_f = values[:, ch].std()
        mu_b = opp_bg[..., ch].mean()
        sd_b = opp_bg[..., ch].std()
        mu_t = mu_f + strength * (mu_b - mu_f)
        sd_t = sd_f + strength * (sd_b - sd_f)
        values[:, ch] = (values[:, ch] - mu_f) * (sd_t / max(sd_f, 1e-6)) + mu_t
    opp[region] = values
    adjusted = opponent_to_rgb(opp).astype(np.float32)
    out = composite.astype(np.float32)
    out[region] = adjusted[region]
    return out


# ---------------------------------------------------------------------------
# Sample generation

@dataclass(frozen=True)
class GeneratorConfig:
    trimap_radius: int = 5               # at the reference diagonal
    radius_reference_diag: float = 860.0
    radius_max: int = 25
    manipulation_prob: float = 0.5       # each chain op drawn independently
    harmonize_prob: float = 0.5
    min_area: float = MASK_AREA_MIN
    max_area: float = MASK_AREA_MAX
    offset_tries: int = 10
    max_rescales: int = 5
    rescale_factor: float = 0.8
    matte_dir: str | None = None
    max_attempts: int = 8                # per-sample retries in dataset runs

    def scaled_radius(self, height: int, width: int) -> int:
        diag = math.hypot(height, width)
        r = round(self.trimap_radius * diag / self.radius_reference_diag)
        return int(min(max(r, 1), self.radius_max))


@dataclass(frozen=True)
class SourceItem:
    """One source image with (for foregrounds) its object annotation mask."""

    image_id: str
    image: np.ndarray
    object_mask: np.ndarray | None = None
    annotation_id: str | None = None


def _external_matte(cfg: GeneratorConfig, item: SourceItem, trimap: Trimap) -> np.ndarray | None:
    if cfg.matte_dir is None:
        return None
    path = Path(cfg.matte_dir) / f"{item.image_id}_{item.annotation_id}.png"
    matte = load_matte(path)  # missing file raises: external mode is explicit
    if matte.shape != trimap.labels.shape:
        raise ShapeMismatch(f"matte {matte.shape} vs trimap {trimap.labels.shape}")
    return matte


def generate_sample(fg_src: SourceItem, bg_src: SourceItem | None, mode: str,
                    seed: int, cfg: GeneratorConfig | None = None) -> ForgerySample:
    """Create one forged sample; deterministic given the seed and sources."""
    cfg = cfg or GeneratorConfig()
    if mode not in ("splice", "copymove"):
        raise ValueError(f"mode must be 'splice' or 'copymove', got {mode!r}")
    if mode == "copymove":
        bg_image, bg_id = fg_src.image, fg_src.image_id
    else:
        if bg_src is None:
            raise ValueError("splice mode requires a background source")
        bg_image, bg_id = bg_src.image, bg_src.image_id
    if fg_src.object_mask is None or not fg_src.object_mask.any():
        raise EmptyMask(f"foreground source {fg_src.image_id} has no object mask")

    rng = np.random.default_rng(seed)
    radius = cfg.scaled_radius(*fg_src.object_mask.shape)
    trimap = build_trimap(fg_src.object_mask, radius)
    matte = _external_matte(cfg, fg_src, trimap)
    if matte is None:
        alpha = estimate_alpha(fg_src.image, trimap, sigma=max(radius / 2.0, 0.5))
    else:
        alpha = clamp_to_trimap(matte, trimap)

    bbox = support_bbox(alpha)
    if bbox is None:
        raise EmptyMask("alpha matte has empty support")
    top, bottom, left, right = bbox
    fg_crop = np.ascontiguousarray(fg_src.image[top:bottom, left:right])
    alpha_crop = np.ascontiguousarray(alpha[top:bottom, left:right])

    params = sample_manipulation_params(rng, cfg.manipulation_prob)
    fg_t, alpha_t = apply_manipulation_chain(fg_crop, alpha_crop, params)
    bbox = support_bbox(alpha_t)
    if bbox is None:
        raise PlacementFailed("matte support vanished under the manipulation chain")
    top, bottom, left, right = bbox
    fg_t = np.ascontiguousarray(fg_t[top:bottom, left:right])
    alpha_t = np.ascontiguousarray(alpha_t[top:bottom, left:right])

    placement = place_region(
        alpha_t, bg_image.shape[:2], rng,
        min_area=cfg.min_area, max_area=cfg.max_area,
        offset_tries=cfg.offset_tries, max_rescales=cfg.max_rescales,
        rescale_factor=cfg.rescale_factor,
    )
    if placement.scale != 1.0:
        ph, pw = placement.alpha.shape
        fg_t = np.clip(cv2.resize(fg_t, (pw, ph), interpolation=cv2.INTER_CUBIC), 0.0, 1.0)
    composite, mask = alpha_blend(fg_t, placement.alpha, bg_image,
                                  (placement.top, placement.left))

    ratio = float(mask.sum()) / float(mask.shape[0] * mask.shape[1])
    if not (cfg.min_area <= ratio <= cfg.max_area):
        raise PlacementFailed(f"final mask area ratio {ratio:.4f} out of bounds")

    harmonize_draw = rng.random()
    strength_draw = float(rng.uniform(0.5, 1.0))
    strength = None
    if harmonize_draw < cfg.harmonize_prob:
        composite = harmonize(composite, mask, bg_image, strength_draw)
        strength = strength_draw

    support_full = np.zeros(mask.shape, dtype=bool)
    ph, pw = placement.alpha.shape
    support_full[placement.top:placement.top + ph,
                 placement.left:placement.left + pw] = placement.alpha > 0
    outside = support_full & ~mask.astype(bool)
    if outside.any():
        dist = ndimage.distance_transform_edt(~mask.astype(bool))
        feather_px = int(math.ceil(dist[outside].max()))
    else:
        feather_px = 0

    sample = ForgerySample(
        image=composite,
        mask=mask,
        mode=mode,
        seed=int(seed),
        params=params,
        provenance={
            "foreground": fg_src.image_id,
            "background": bg_id,
            "annotation": fg_src.annotation_id,
            "trimap_radius": radius,
            "feather_px": feather_px,
        },
        harmonize_strength=strength,
    )
    sample.validate()
    return sample


# ---------------------------------------------------------------------------
# COCO-style manifest handling

def annotation_to_mask(segmentation, height: int, width: int) -> np.ndarray:
    """Rasterize a polygon list or an uncompressed RLE dict to a {0,1} mask."""
    mask = np.zeros((height, width), dtype=np.uint8)
    if isinstance(segmentation, dict):
        counts = segmentation.get("counts")
        if not isinstance(counts, (list, tuple)):
            raise ValueError("compressed RLE counts are not supported; use list counts")
        size_h, size_w = segmentation["size"]
        if (size_h, size_w) != (height, width):
            raise ShapeMismatch(f"RLE size {(size_h, size_w)} vs image {(height, width)}")
        flat = np.zeros(size_h * size_w, dtype=np.uint8)
        pos = 0
        value = 0
        for run in counts:
            flat[pos:pos + run] = value
            pos += run
            value = 1 - value
        return flat.reshape((size_w, size_h)).T.astype(np.uint8)  # column-major runs
    polygons = [np.asarray(poly, dtype=np.float64).reshape(-1, 2) for poly in segmentation]
    points = [np.round(p).astype(np.int32) for p in polygons if len(p) >= 3]
    if points:
        cv2.fillPoly(mask, points, 1)
    return mask


@dataclass(frozen=True)
class CatalogAnnotation:
    annotation_id: str
    segmentation: object


@dataclass(frozen=True)
class CatalogImage:
    image_id: str
    path: Path
    height: int
    width: int
    annotations: tuple[CatalogAnnotation, ...] = ()


@dataclass
class SourceCatalog:
    images: list[CatalogImage]
    _cache: dict = field(default_factory=dict, repr=False)

    def foregrounds(self) -> list[CatalogImage]:
        return [img for img in self.images if img.annotations]

    def load(self, entry: CatalogImage) -> np.ndarray:
        cached = self._cache.get(entry.image_id)
        if cached is None:
            cached = load_image(entry.path)
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[entry.image_id] = cached
        return cached

    def source_item(self, entry: CatalogImage,
                    annotation: CatalogAnnotation | None = None) -> SourceItem:
        image = self.load(entry)
        mask = None
        if annotation is not None:
            mask = annotation_to_mask(annotation.segmentation, image.shape[0], image.shape[1])
        return SourceItem(entry.image_id, image, mask,
                          annotation.annotation_id if annotation else None)


def load_manifest(path: str | Path, images_root: str | Path | None = None) -> SourceCatalog:
    """Parse a COCO-style annotation JSON into a source catalog.

    ``file_name`` entries are resolved against ``images_root`` (defaults to
    the manifest's directory).
    """
    path = Path(path)
    if not path.exists():
        raise DataUnavailable(f"manifest not found: {path}")
    root = Path(images_root) if images_root else path.parent
    payload = json.loads(path.read_text())
    by_image: dict = {}
    for record in payload.get("images", []):
        by_image[record["id"]] = {
            "file_name": record["file_name"],
            "height": int(record.get("height", 0)),
            "width": int(record.get("width", 0)),
            "annotations": [],
        }
    for ann in payload.get("annotations", []):
        image_id = ann["image_id"]
        if image_id in by_image:
            by_image[image_id]["annotations"].append(
                CatalogAnnotation(str(ann.get("id", len(by_image[image_id]["annotations"]))),
                                  ann["segmentation"])
            )
    images = [
        CatalogImage(
            image_id=str(key),
            path=root / info["file_name"],
            height=info["height"],
            width=info["width"],
            annotations=tuple(info["annotations"]),
        )
        for key, info in sorted(by_image.items(), key=lambda kv: str(kv[0]))
    ]
    if not images:
        raise DataUnavailable(f"manifest {path} lists no images")
    return SourceCatalog(images)


# ---------------------------------------------------------------------------
# Batch generation

@dataclass
class GenerationResult:
    index_path: Path
    written: int
    skipped: list[int]
    reused: int = 0


def _sample_seed(global_seed: int, index: int, attempt: int) -> tuple[np.random.Generator, int]:
    root = np.random.SeedSequence([int(global_seed), int(index), int(attempt)])
    pick_seq, sample_seq = root.spawn(2)
    seed = int(sample_seq.generate_state(1, np.uint64)[0])
    return np.random.default_rng(pick_seq), seed


def plan_modes(n: int, splice_fraction: float) -> list[str]:
    """Deterministic mode plan: round(n * fraction) splices, then copy-moves."""
    n_splice = int(round(n * splice_fraction))
    return ["splice"] * n_splice + ["copymove"] * (n - n_splice)


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def load_index(path: str | Path) -> list[dict]:
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def generate_dataset(manifest: str | Path, out_dir: str | Path, n: int,
                     mode_mix: float = 0.5, seed: int = 0,
                     cfg: GeneratorConfig | None = None,
                     images_root: str | Path | None = None,
                     workers: int = 0) -> GenerationResult:
    """Generate ``n`` samples under ``out_dir`` with a JSONL index.

    ``mode_mix`` is the splice fraction. Runs are resumable: indices already
    present in the index are kept. Samples that keep failing within the retry
    budget are logged and skipped; the caller can treat a nonempty skip list
    as a partial failure.
    """
    cfg = cfg or GeneratorConfig()
    catalog = load_manifest(manifest, images_root)
    foregrounds = catalog.foregrounds()
    if not foregrounds:
        raise DataUnavailable("manifest has no annotated images to use as foregrounds")

    out = Path(out_dir)
    for sub in ("images", "masks", "meta"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    index_path = out / "index.jsonl"
    existing: dict[int, dict] = {}
    if index_path.exists():
        for entry in load_index(index_path):
            existing[int(entry["index"])] = entry

    modes = plan_modes(n, mode_mix)
    pending = [i for i in range(n) if i not in existing]

    def build(i: int):
        mode = modes[i]
        last_error: Exception | None = None
        for attempt in range(cfg.max_attempts):
            pick_rng, sample_seed = _sample_seed(seed, i, attempt)
            fg_entry = foregrounds[int(pick_rng.integers(len(foregrounds)))]
            annotation = fg_entry.annotations[int(pick_rng.integers(len(fg_entry.annotations)))]
            bg_entry = catalog.images[int(pick_rng.integers(len(catalog.images)))]
            try:
                fg_item = catalog.source_item(fg_entry, annotation)
                bg_item = catalog.source_item(bg_entry) if mode == "splice" else None
                return generate_sample(fg_item, bg_item, mode, sample_seed, cfg)
            except (PlacementFailed, EmptyMask) as err:
                last_error = err
        raise PlacementFailed(f"sample {i} failed after {cfg.max_attempts} attempts: {last_error}")

    results: dict[int, ForgerySample] = {}
    skipped: list[int] = []

    def run(i: int):
        try:
            return i, build(i)
        except PlacementFailed:
            return i, None

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, sample in pool.map(run, pending):
                if sample is None:
                    skipped.append(i)
                else:
                    results[i] = sample
    else:
        for i in pending:
            _, sample = run(i)
            if sample is None:
                skipped.append(i)
            else:
                results[i] = sample

    # Single appender: entries land in index order regardless of worker timing.
    with open(index_path, "a") as fh:
        for i in sorted(results):
            sample = results[i]
            stem = f"{i:06d}"
            image_rel = f"images/{stem}.png"
            mask_rel = f"masks/{stem}.png"
            meta_rel = f"meta/{stem}.json"
            write_sample(sample, out / image_rel, out / mask_rel, out / meta_rel)
            entry = {
                "index": i,
                "mode": sample.mode,
                "seed": sample.seed,
                "image": image_rel,
                "mask": mask_rel,
                "meta": meta_rel,
                "image_sha256": sha256_file(out / image_rel),
                "mask_sha256": sha256_file(out / mask_rel),
            }
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    return GenerationResult(index_path, written=len(results),
                            skipped=sorted(skipped), reused=len(existing))
