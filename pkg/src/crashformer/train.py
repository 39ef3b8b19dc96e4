"""Training loop: Adam, weighted cross entropy, reduce-on-plateau learning
rate, early stopping, best-checkpoint return.

An "improvement" everywhere in this module means the validation loss
dropped by at least `improvement_delta` below the best seen so far; the
scheduler and the stopper share that rule so float noise cannot reset
either counter. The best checkpoint itself tracks the exact minimum.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .dataset import ClassWeights, SampleSet
from .errors import RuntimeFailure, ValidationError
from .model import weighted_ce

DEFAULT_IMPROVEMENT_DELTA = 1e-6


@dataclass
class TrainConfig:
    max_epochs: int = 200
    early_stop_patience: int = 10
    lr_init: float = 1e-3
    lr_factor: float = 0.9
    lr_patience: int = 5
    lr_min: float = 1e-6
    batch_size: int = 256
    seed: int = 0
    class_weights: ClassWeights = field(default_factory=lambda: ClassWeights(1.0, 1.0))
    grad_clip: Optional[float] = 5.0
    improvement_delta: float = DEFAULT_IMPROVEMENT_DELTA

    def __post_init__(self):
        if not (0.0 < self.lr_factor < 1.0):
            raise ValidationError(f"lr_factor {self.lr_factor} outside (0, 1)")
        if self.lr_min >= self.lr_init:
            raise ValidationError(f"lr_min {self.lr_min} must be below lr_init {self.lr_init}")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValidationError("patiences must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValidationError("max_epochs and batch_size must be >= 1")


class PlateauScheduler:
    """Multiply the rate by `factor` after `patience` consecutive epochs
    without improvement, clamped below at `lr_min`."""

    def __init__(self, lr_init: float, factor: float, patience: int, lr_min: float,
                 delta: float = DEFAULT_IMPROVEMENT_DELTA):
        self.lr = lr_init
        self.factor = factor
        self.patience = patience
        self.lr_min = lr_min
        self.delta = delta
        self.best: Optional[float] = None
        self.stale = 0

    def step(self, val_loss: float) -> float:
        if self.best is None or self.best - val_loss >= self.delta:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self.stale = 0
        return self.lr


class EarlyStopping:
    """True once the best loss has not improved for `patience` epochs."""

    def __init__(self, patience: int, delta: float = DEFAULT_IMPROVEMENT_DELTA):
        self.patience = patience
        self.delta = delta
        self.best: Optional[float] = None
        self.stale = 0

    def step(self, val_loss: float) -> bool:
        if self.best is None or self.best - val_loss >= self.delta:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def lr_step(current_lr: float, epochs_without_improvement: int, cfg: TrainConfig) -> float:
    """One plateau decision: reduce only when the stale count hits patience."""
    if epochs_without_improvement >= cfg.lr_patience:
        return max(current_lr * cfg.lr_factor, cfg.lr_min)
    return current_lr


def early_stop(val_losses: list[float], cfg: TrainConfig) -> bool:
    """True iff the best loss so far is not in the last `patience` epochs'
    improvements, i.e. `patience` epochs have passed without a new best."""
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.improvement_delta)
    stopped = False
    for v in val_losses:
        stopped = stopper.step(v)
    return stopped


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False

    def to_json_lines(self) -> str:
        lines = [json.dumps(vars(e), sort_keys=True) for e in self.epochs]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json_lines(), encoding="utf-8")


@dataclass
class RecipeTrace:
    """Replay of the recipe against a scripted loss sequence (no model)."""

    lrs: list[float]
    best_epoch: int
    stopped_after: Optional[int]


def replay_recipe(val_losses: list[float], cfg: TrainConfig) -> RecipeTrace:
    """Drive scheduler/stopper/best-checkpoint logic over given losses;
    epochs are 1-based. Used to pin the recipe without training."""
    sched = PlateauScheduler(cfg.lr_init, cfg.lr_factor, cfg.lr_patience,
                             cfg.lr_min, cfg.improvement_delta)
    stop = EarlyStopping(cfg.early_stop_patience, cfg.improvement_delta)
    lrs, best_epoch, best = [], 0, math.inf
    for epoch, v in enumerate(val_losses, start=1):
        if v < best:
            best, best_epoch = v, epoch
        lrs.append(sched.step(v))
        if stop.step(v):
            return RecipeTrace(lrs=lrs, best_epoch=best_epoch, stopped_after=epoch)
    return RecipeTrace(lrs=lrs, best_epoch=best_epoch, stopped_after=None)


class ArrayBatches:
    """Tensor-backed batch source; tiles are stored once per region and
    gathered through per-sample references."""

    def __init__(self, seq: torch.Tensor, labels: torch.Tensor,
                 demo: Optional[torch.Tensor] = None,
                 tile_refs: Optional[torch.Tensor] = None,
                 tile_bank: Optional[torch.Tensor] = None):
        self.seq = seq
        self.labels = labels
        self.demo = demo
        self.tile_refs = tile_refs
        self.tile_bank = tile_bank

    def __len__(self) -> int:
        return self.seq.shape[0]

    def take(self, idx: np.ndarray) -> dict:
        t = torch.from_numpy(np.ascontiguousarray(idx))
        batch = {"seq": self.seq[t], "labels": self.labels[t]}
        if self.demo is not None:
            batch["demo"] = self.demo[t]
        if self.tile_bank is not None:
            batch["tiles"] = self.tile_bank[self.tile_refs[t]]
        return batch


def load_tile_bank(samples: SampleSet, cache_dir: str | Path, img_size: int) -> torch.Tensor:
    """Decode each unique region's cached tile into a (R, 3, S, S) float
    tensor scaled to [0, 1]."""
    from PIL import Image

    bank = np.empty((len(samples.unique_regions), 3, img_size, img_size), dtype=np.float32)
    for i, rel in enumerate(samples.tile_paths):
        path = Path(cache_dir) / rel
        img = Image.open(path).convert("RGB")
        if img.size != (img_size, img_size):
            img = img.resize((img_size, img_size), Image.LANCZOS)
        bank[i] = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return torch.from_numpy(bank)


def batches_for(samples: SampleSet, indices: np.ndarray,
                tile_bank: Optional[torch.Tensor] = None) -> ArrayBatches:
    demo = None
    if samples.demo is not None:
        demo = torch.from_numpy(samples.demo[indices])
    refs = None
    if tile_bank is not None:
        refs = torch.from_numpy(samples.tile_refs[indices].astype(np.int64))
    return ArrayBatches(
        seq=torch.from_numpy(samples.seq[indices]),
        labels=torch.from_numpy(samples.labels[indices].astype(np.int64)),
        demo=demo, tile_refs=refs, tile_bank=tile_bank,
    )


def _default_forward(model, batch: dict) -> torch.Tensor:
    return model(batch["seq"], batch.get("tiles"), batch.get("demo"))


def train_loop(model: torch.nn.Module, train: ArrayBatches, val: ArrayBatches,
               cfg: TrainConfig,
               forward: Callable = _default_forward,
               loss_fn: Optional[Callable] = None) -> TrainHistory:
    """Run the full recipe; on return the model holds the best-validation
    parameters (never the last epoch's)."""
    if len(train) == 0 or len(val) == 0:
        raise ValidationError("train and validation sets must be non-empty")
    if loss_fn is None:
        loss_fn = lambda logits, labels: weighted_ce(logits, labels, cfg.class_weights)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=(0.9, 0.999), eps=1e-8)
    sched = PlateauScheduler(cfg.lr_init, cfg.lr_factor, cfg.lr_patience,
                             cfg.lr_min, cfg.improvement_delta)
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.improvement_delta)

    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.monotonic()
        model.train()
        order = rng.permutation(len(train))
        train_loss_sum = 0.0
        for b0 in range(0, len(order), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            batch = train.take(idx)
            opt.zero_grad()
            loss = loss_fn(forward(model, batch), batch["labels"])
            if not torch.isfinite(loss):
                raise RuntimeFailure(f"non-finite training loss at epoch {epoch}, "
                                     f"batch {b0 // cfg.batch_size}")
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            train_loss_sum += float(loss.detach()) * len(idx)
        train_loss = train_loss_sum / len(train)

        model.eval()
        val_loss_sum = 0.0
        with torch.no_grad():
            for b0 in range(0, len(val), cfg.batch_size):
                idx = np.arange(b0, min(b0 + cfg.batch_size, len(val)))
                batch = val.take(idx)
                vloss = loss_fn(forward(model, batch), batch["labels"])
                val_loss_sum += float(vloss) * len(idx)
        val_loss = val_loss_sum / len(val)
        if not math.isfinite(val_loss):
            raise RuntimeFailure(f"non-finite validation loss at epoch {epoch}")

        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

        lr = sched.step(val_loss)
        for group in opt.param_groups:
            group["lr"] = lr
        history.epochs.append(EpochRecord(epoch=epoch, train_loss=train_loss,
                                          val_loss=val_loss, lr=lr,
                                          wall_seconds=time.monotonic() - t0))
        if stopper.step(val_loss):
            history.stopped_early = True
            break

    model.load_state_dict(best_state)
    model.eval()
    return history
