"""Pixel-level F1/IoU evaluation with fixed-threshold binarization.

The binarization threshold is 0.5 and strict (ties go to 0). Degenerate 0/0
counts (empty ground truth and empty prediction) score 1.0 by convention;
the public test corpora contain only forged images, but generator dry runs
produce such cases.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .data import validate_mask
from .errors import ShapeMismatch

DEFAULT_THRESHOLD = 0.5


def binarize(pred: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Binary mask where pixels strictly above ``threshold`` map to 1."""
    if pred.ndim != 2:
        raise ShapeMismatch(f"expected [H, W] probability map, got {pred.shape}")
    return (pred > threshold).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred_bin: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    validate_mask(pred_bin)
    validate_mask(gt)
    if pred_bin.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred_bin.shape} vs ground truth {gt.shape}")
    p = pred_bin.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int((p & g).sum()),
        fp=int((p & ~g).sum()),
        fn=int((~p & g).sum()),
        tn=int((~p & ~g).sum()),
    )


def f1(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2.0 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def score_pair(pred: np.ndarray, gt: np.ndarray,
               threshold: float = DEFAULT_THRESHOLD) -> tuple[float, float]:
    """(F1, IoU) of one probability map against its ground-truth mask.

    When the prediction grid differs from the ground truth (resized inputs),
    the probability map is bilinearly resampled to the mask size first.
    """
    if pred.shape != gt.shape:
        pred = _resize_probs(pred, gt.shape)
    c = confusion(binarize(pred, threshold), gt)
    return f1(c), iou(c)


def _resize_probs(pred: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    return cv2.resize(pred.astype(np.float32), (hw[1], hw[0]), interpolation=cv2.INTER_LINEAR)


@dataclass
class EvalReport:
    rows: list[tuple[str, float, float]]  # (image_id, f1, iou), sorted by id
    threshold: float

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def mean_f1(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else 0.0

    @property
    def mean_iou(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else 0.0

    def summary(self) -> dict:
        return {
            "count": self.count,
            "threshold": self.threshold,
            "mean_f1": self.mean_f1,
            "mean_iou": self.mean_iou,
        }


def evaluate_dataset(predict_fn, samples, threshold: float = DEFAULT_THRESHOLD,
                     workers: int = 0) -> EvalReport:
    """Score ``predict_fn`` over (image_id, image, mask) triples.

    ``predict_fn`` maps an image to a probability map. Images are independent,
    so ``workers`` > 1 scores them in a thread pool; rows are emitted in
    sorted image-id order either way, so reports are order-stable.
    """

    def score(triple):
        image_id, image, gt = triple
        s_f1, s_iou = score_pair(predict_fn(image), gt, threshold)
        return str(image_id), s_f1, s_iou

    if workers and workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score, list(samples)))
    else:
        rows = [score(triple) for triple in samples]
    rows.sort(key=lambda r: r[0])
    return EvalReport(rows=rows, threshold=threshold)


def write_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "f1", "iou"])
        for image_id, s_f1, s_iou in report.rows:
            writer.writerow([image_id, f"{s_f1:.6f}", f"{s_iou:.6f}"])


def write_summary(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")


def read_csv(path: str | Path) -> list[tuple[str, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(row[0], float(row[1]), float(row[2])) for row in reader]
