"""Shared test fixtures: synthetic scenes, manifests, finite-difference checks."""
from __future__ import annotations

import json
import math
from pathlib import Path

import cv2
import numpy as np
import torch

from profact.data import save_image


def smooth_background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Low-frequency random image: bicubically upsampled coarse noise."""
    low = rng.random((max(2, height // 16), max(2, width // 16), 3)).astype(np.float32)
    img = cv2.resize(low, (width, height), interpolation=cv2.INTER_CUBIC)
    return np.clip(img, 0.0, 1.0)


def blob_polygon(rng: np.random.Generator, cx: float, cy: float, radius: float,
                 points: int = 12) -> list[float]:
    """Star-convex polygon as a flat [x1, y1, x2, y2, ...] list."""
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, points))
    radii = rng.uniform(0.55, 1.0, points) * radius
    flat: list[float] = []
    for a, r in zip(angles, radii):
        flat.extend((cx + r * math.cos(a), cy + r * math.sin(a)))
    return flat


def rasterize_polygon(poly: list[float], height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    pts = np.round(np.asarray(poly).reshape(-1, 2)).astype(np.int32)
    cv2.fillPoly(mask, [pts], 1)
    return mask


def synthetic_scene(rng: np.random.Generator, size: int = 128, n_objects: int = 1):
    """(image, polygons): smooth background with textured blob objects painted in."""
    image = smooth_background(rng, size, size)
    polygons = []
    for _ in range(n_objects):
        radius = size * rng.uniform(0.12, 0.2)
        cx = rng.uniform(radius + 2, size - radius - 2)
        cy = rng.uniform(radius + 2, size - radius - 2)
        poly = blob_polygon(rng, cx, cy, radius)
        mask = rasterize_polygon(poly, size, size).astype(bool)
        color = rng.uniform(0.0, 1.0, 3).astype(np.float32)
        texture = color[None, None, :] + rng.normal(0, 0.05, image.shape).astype(np.float32)
        image = image.copy()
        image[mask] = np.clip(texture, 0.0, 1.0)[mask]
        polygons.append(poly)
    return np.clip(image, 0.0, 1.0), polygons


def write_manifest(root: Path, n_images: int = 6, size: int = 128, seed: int = 0,
                   objects_per_image: int = 2) -> Path:
    """Write a COCO-style manifest plus its source images; returns the JSON path."""
    rng = np.random.default_rng(seed)
    images_dir = root / "sources"
    images_dir.mkdir(parents=True, exist_ok=True)
    images = []
    annotations = []
    ann_id = 1
    for image_id in range(1, n_images + 1):
        image, polygons = synthetic_scene(rng, size=size, n_objects=objects_per_image)
        name = f"src_{image_id:03d}.png"
        save_image(images_dir / name, image)
        images.append({"id": image_id, "file_name": f"sources/{name}",
                       "height": size, "width": size})
        for poly in polygons:
            annotations.append({"id": ann_id, "image_id": image_id,
                                "segmentation": [poly]})
            ann_id += 1
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"images": images, "annotations": annotations}))
    return manifest


def disk_mask(size: int, cy: int, cx: int, radius: int) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= radius**2).astype(np.uint8)


# ---------------------------------------------------------------------------
# Finite-difference oracles (double precision)

def _rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check_params(scalar_fn, parameters, n: int = 10, h: float = 1e-3,
                    seed: int = 0) -> float:
    """Max relative error between autograd and central differences on
    ``n`` randomly chosen parameter entries. ``scalar_fn`` recomputes the
    scalar from the current parameter values."""
    params = [p for p in parameters if p.requires_grad]
    loss = scalar_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        pi = int(rng.integers(len(params)))
        param = params[pi]
        flat = param.detach().reshape(-1)
        ei = int(rng.integers(flat.numel()))
        grad = grads[pi]
        analytic = 0.0 if grad is None else float(grad.reshape(-1)[ei])
        with torch.no_grad():
            original = float(flat[ei])
            flat[ei] = original + h
            f_plus = float(scalar_fn())
            flat[ei] = original - h
            f_minus = float(scalar_fn())
            flat[ei] = original
        fd = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, _rel_err(fd, analytic))
    return worst


def fd_check_input(scalar_fn, x: torch.Tensor, n: int = 10, h: float = 1e-3,
                   seed: int = 0) -> float:
    """Max relative error between autograd and central differences on ``n``
    randomly chosen input entries. ``scalar_fn(x)`` maps the input to a scalar."""
    x = x.detach().clone().requires_grad_(True)
    loss = scalar_fn(x)
    (grad,) = torch.autograd.grad(loss, x)
    rng = np.random.default_rng(seed)
    flat = x.detach().reshape(-1)
    worst = 0.0
    for _ in range(n):
        ei = int(rng.integers(flat.numel()))
        with torch.no_grad():
            original = float(flat[ei])
            flat[ei] = original + h
            f_plus = float(scalar_fn(x))
            flat[ei] = original - h
            f_minus = float(scalar_fn(x))
            flat[ei] = original
        fd = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, _rel_err(fd, float(grad.reshape(-1)[ei])))
    return worst
