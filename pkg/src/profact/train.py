"""Two-stage training protocol: optimization loop, schedule, model selection.

Stage 1 trains from scratch on the large generated corpus; stage 2 fine-tunes
the stage-1 best checkpoint on the high-resolution corpus with a larger crop,
smaller batch and lower learning rate. The learning rate follows cosine
annealing, the optimizer is AdamW with gradient clipping, and the checkpoint
kept per stage is the one maximizing validation IoU of the refined map.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np
import torch

from .checkpoint import load_model, save_model, state_arrays, state_hash
from .augment import train_augment
from .data import ForgerySample, ManipulationParams, load_image, load_mask
from .errors import CropInfeasible, DataUnavailable, NonFiniteLoss
from .losses import LossConfig, combined_loss
from .metrics import score_pair
from .model import ForgeryLocalizer, ModelConfig
from .synth import load_index


@dataclass
class StageConfig:
    index: str
    stage: int = 1
    batch_size: int = 16
    lr_initial: float = 1e-4
    epochs: int = 50
    crop: int = 512
    init: str = "fresh"              # "fresh" or a checkpoint path
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    workers: int = 0
    val_fraction: float = 0.1
    out_dir: str = "runs/stage1"
    model: dict | None = None        # ModelConfig dict, used when init == "fresh"
    pretrained_backbone: str | None = None  # optional key-mapped weight file

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0 or self.crop <= 0:
            raise ValueError("batch_size, epochs and crop must be positive")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be positive")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")

    @classmethod
    def stage2_defaults(cls, index: str, init: str, out_dir: str = "runs/stage2") -> "StageConfig":
        """Fine-tuning defaults: batch 4, lr 1e-5, 5 epochs, 1024 crop."""
        return cls(index=index, stage=2, batch_size=4, lr_initial=1e-5,
                   epochs=5, crop=1024, init=init, out_dir=out_dir)

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)


def cosine_lr(step: int, total_steps: int, lr_initial: float) -> float:
    """Cosine-annealed learning rate; reaches ~0 at the final step."""
    if total_steps <= 1:
        return lr_initial
    t = min(max(step, 0), total_steps - 1)
    return 0.5 * lr_initial * (1.0 + math.cos(math.pi * t / (total_steps - 1)))


def split_index(entries: list[dict], val_fraction: float = 0.1,
                seed: int = 0) -> tuple[list[dict], list[dict]]:
    """Deterministic hash-based train/validation split of an index.

    An entry goes to validation when its (seed, identity) hash lands in the
    lowest ``val_fraction`` bucket, so membership is stable under appends.
    Both sides are kept nonempty whenever there are at least two entries.
    """
    buckets = []
    for entry in entries:
        key = f"{seed}:{entry.get('image', entry.get('index'))}".encode()
        buckets.append(int.from_bytes(hashlib.sha256(key).digest()[:8], "big") / 2**64)
    val = [e for e, b in zip(entries, buckets) if b < val_fraction]
    train = [e for e, b in zip(entries, buckets) if b >= val_fraction]
    if len(entries) >= 2:
        if not val:
            pick = int(np.argmin(buckets))
            val = [entries[pick]]
            train = [e for i, e in enumerate(entries) if i != pick]
        elif not train:
            pick = int(np.argmax(buckets))
            train = [entries[pick]]
            val = [e for i, e in enumerate(entries) if i != pick]
    return train, val


def _load_entry(root: Path, entry: dict) -> ForgerySample:
    image = load_image(root / entry["image"])
    mask = load_mask(root / entry["mask"])
    return ForgerySample(image=image, mask=mask, mode=entry.get("mode", "splice"),
                         seed=int(entry.get("seed", 0)), params=ManipulationParams())


def _augmented_pair(root: Path, entry: dict, stage: int, crop: int,
                    seed_seq: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    sample = _load_entry(root, entry)
    rng = np.random.default_rng(np.random.SeedSequence(list(seed_seq)))
    try:
        out = train_augment(sample, stage, rng, crop_size=crop)
        return out.image, out.mask
    except CropInfeasible:
        # Degenerate geometry for this draw; fall back to a plain resize so the
        # step still trains on the sample.
        image = cv2.resize(sample.image, (crop, crop), interpolation=cv2.INTER_CUBIC)
        mask = cv2.resize(sample.mask, (crop, crop), interpolation=cv2.INTER_NEAREST)
        return np.clip(image, 0.0, 1.0), mask


def _to_batch(pairs: list[tuple[np.ndarray, np.ndarray]], device, dtype):
    images = np.stack([p[0].transpose(2, 0, 1) for p in pairs])
    masks = np.stack([p[1][None].astype(np.float32) for p in pairs])
    x = torch.from_numpy(np.ascontiguousarray(images)).to(device=device, dtype=dtype)
    y = torch.from_numpy(masks).to(device=device, dtype=dtype)
    return x, y


@dataclass
class StageReport:
    stage: int
    best_checkpoint: Path
    best_iou: float
    initial_state_hash: str
    best_state_hash: str
    history: list[dict] = field(default_factory=list)
    log_path: Path | None = None


def validate_iou(model: ForgeryLocalizer, entries: list[dict], root: Path,
                 threshold: float = 0.5) -> float:
    """Mean refined-map IoU over validation entries at full image size."""
    scores = []
    for entry in entries:
        sample = _load_entry(root, entry)
        _, refined = model.predict(sample.image)
        _, entry_iou = score_pair(refined, sample.mask, threshold)
        scores.append(entry_iou)
    return float(np.mean(scores)) if scores else 0.0


def train_stage(model: ForgeryLocalizer, cfg: StageConfig,
                loss_cfg: LossConfig | None = None) -> StageReport:
    """Optimize ``model`` for one stage and return the best-IoU checkpoint."""
    loss_cfg = loss_cfg or LossConfig()
    index_path = Path(cfg.index)
    if not index_path.exists():
        raise DataUnavailable(f"dataset index not found: {index_path}")
    entries = load_index(index_path)
    if not entries:
        raise DataUnavailable(f"dataset index is empty: {index_path}")
    root = index_path.parent
    train_entries, val_entries = split_index(entries, cfg.val_fraction, cfg.seed)
    if not train_entries:
        raise DataUnavailable("no training entries after validation split")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    best_path = out_dir / "best.ckpt"

    torch.manual_seed(cfg.seed)
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_initial,
                                  weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_entries) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    initial_hash = state_hash(state_arrays(model))

    best_iou = -1.0
    best_hash = ""
    history: list[dict] = []
    step = 0
    with open(log_path, "w") as log:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, epoch])
            ).permutation(len(train_entries))
            model.train()
            for start in range(0, len(order), cfg.batch_size):
                chunk = [train_entries[i] for i in order[start:start + cfg.batch_size]]
                jobs = [
                    (root, entry, cfg.stage, cfg.crop, (cfg.seed, epoch, int(i)))
                    for entry, i in zip(chunk, order[start:start + cfg.batch_size])
                ]
                if cfg.workers > 1:
                    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                        pairs = list(pool.map(lambda a: _augmented_pair(*a), jobs))
                else:
                    pairs = [_augmented_pair(*a) for a in jobs]
                x, y = _to_batch(pairs, device, dtype)

                lr = cosine_lr(step, total_steps, cfg.lr_initial)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()
                coarse, refined = model(x)
                loss_coarse = combined_loss(coarse, y, loss_cfg)
                loss_refined = combined_loss(refined, y, loss_cfg)
                loss = loss_coarse + loss_refined
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        f"coarse={loss_coarse.item()} refined={loss_refined.item()} lr={lr}"
                    )
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                optimizer.step()
                log.write(json.dumps({
                    "stage": cfg.stage, "epoch": epoch, "step": step, "lr": lr,
                    "loss": float(loss.item()),
                    "loss_coarse": float(loss_coarse.item()),
                    "loss_refined": float(loss_refined.item()),
                }) + "\n")
                step += 1

            model.eval()
            val_iou = validate_iou(model, val_entries, root)
            improved = val_iou > best_iou
            if improved:
                best_iou = val_iou
                arrays = state_arrays(model)
                best_hash = state_hash(arrays)
                save_model(best_path, model, extra={
                    "stage": cfg.stage, "epoch": epoch, "val_iou": val_iou,
                })
            record = {"stage": cfg.stage, "epoch": epoch, "val_iou": val_iou,
                      "best": improved}
            history.append(record)
            log.write(json.dumps(record) + "\n")

    return StageReport(
        stage=cfg.stage,
        best_checkpoint=best_path,
        best_iou=best_iou,
        initial_state_hash=initial_hash,
        best_state_hash=best_hash,
        history=history,
        log_path=log_path,
    )


def build_model(cfg: StageConfig, model_cfg: ModelConfig | None = None) -> ForgeryLocalizer:
    """Construct the stage's starting model from its config.

    ``init`` other than "fresh" is treated as a checkpoint path. A configured
    ``pretrained_backbone`` file is imported into the encoder when present;
    its absence is tolerated with a warning (pre-trained weights are optional).
    """
    if cfg.init != "fresh":
        model, _ = load_model(cfg.init)
        return model
    if model_cfg is None:
        model_cfg = ModelConfig.from_dict(cfg.model) if cfg.model else ModelConfig.desk()
    model = ForgeryLocalizer(model_cfg)
    if cfg.pretrained_backbone:
        from .encoder import import_backbone_weights

        path = Path(cfg.pretrained_backbone)
        if path.exists():
            report = import_backbone_weights(model.encoder, path)
            if report["unexpected"]:
                import warnings

                warnings.warn(f"{len(report['unexpected'])} backbone key(s) did not match")
        else:
            import warnings

            warnings.warn(f"pretrained backbone file not found, training from scratch: {path}")
    return model


def two_stage_train(cfg1: StageConfig, cfg2: StageConfig,
                    model_cfg: ModelConfig | None = None):
    """Run stage 1, then fine-tune its best checkpoint in stage 2.

    Stage 2 always initializes from the stage-1 best; its report's
    ``initial_state_hash`` therefore equals the stage-1 ``best_state_hash``.
    Returns (stage1 report, stage2 report).
    """
    model = build_model(cfg1, model_cfg)
    report1 = train_stage(model, cfg1)
    model2, _ = load_model(report1.best_checkpoint)
    report2 = train_stage(model2, cfg2)
    return report1, report2


@dataclass
class OverfitReport:
    reached_step: int | None        # 1-based step at which refined F1 hit the target
    target_f1: float
    losses: list[float]
    f1_trace: list[float]
    coarse_f1: float
    refined_f1: float


def _batch_f1(probs: torch.Tensor, masks: np.ndarray, threshold: float = 0.5) -> float:
    maps = probs.detach().cpu().numpy()[:, 0]
    scores = [score_pair(maps[i], masks[i], threshold)[0] for i in range(maps.shape[0])]
    return float(np.mean(scores))


def overfit_sanity(model: ForgeryLocalizer, samples: list[ForgerySample],
                   max_steps: int = 600, lr: float = 1e-3, target_f1: float = 0.95,
                   seed: int = 0, stop_at_target: bool = True,
                   loss_cfg: LossConfig | None = None) -> OverfitReport:
    """Train on one fixed batch until the refined map fits it.

    Desk-scale substitute for a full training run: reports how many steps the
    model needs to reach the target train-set F1 on the batch, or failure at
    ``max_steps``. Deterministic for a fixed seed.
    """
    loss_cfg = loss_cfg or LossConfig()
    torch.manual_seed(seed)
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    masks = np.stack([s.mask for s in samples])
    x, y = _to_batch([(s.image, s.mask) for s in samples], device, dtype)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)

    losses: list[float] = []
    f1_trace: list[float] = []
    reached = None
    coarse_f1 = refined_f1 = 0.0
    for step in range(1, max_steps + 1):
        model.train()
        optimizer.zero_grad()
        coarse, refined = model(x)
        loss = combined_loss(coarse, y, loss_cfg) + combined_loss(refined, y, loss_cfg)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"non-finite loss at overfit step {step}")
        loss.backward()
        optimizer.step()
        losses.append(float(loss.item()))
        refined_f1 = _batch_f1(refined, masks)
        coarse_f1 = _batch_f1(coarse, masks)
        f1_trace.append(refined_f1)
        if reached is None and refined_f1 >= target_f1:
            reached = step
            if stop_at_target:
                break
    return OverfitReport(
        reached_step=reached,
        target_f1=target_f1,
        losses=losses,
        f1_trace=f1_trace,
        coarse_f1=coarse_f1,
        refined_f1=refined_f1,
    )
