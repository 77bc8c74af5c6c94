"""Cross-entropy training with SGD momentum and the two-drop step schedule.

The default recipe: 15 epochs at learning rate 0.005, divided by 10 at
epochs 11 and 14, SGD momentum 0.9, weight decay 1e-4, batch size 16.
Epochs are 1-indexed so the drop epochs read literally. Weight decay is
added to the raw gradient before the momentum update (classic SGD
convention). Everything is deterministic given (seed, config, dataset);
metrics lines carry no timestamps so reruns are byte-identical.
"""

from __future__ import annotations

import math
import random
from array import array
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from . import backend
from .data import Dataset, StoredVideo, extract_clip, sample_training_clip
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import Checkpoint, ModelConfig, VideoTransformer
from .tensor import Tape, Tensor, backward, cross_entropy, reshape, scale, zero_grads

# re-exported: cross_entropy is part of this module's public surface
__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainResult",
    "cross_entropy",
    "lr_at",
    "sgd_step",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    base_lr: float = 0.005
    decay_epochs: tuple[int, ...] = (11, 14)
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")
        if self.decay_factor <= 0:
            raise ConfigError("decay_factor must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        for e in self.decay_epochs:
            if not 1 <= e <= self.epochs:
                raise ConfigError(f"decay epoch {e} outside [1, {self.epochs}]")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ConfigError("decay epochs must be strictly increasing")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    momentum_buffers: dict[str, array] = field(default_factory=dict)

    def buffer_for(self, name: str, param: Tensor) -> array:
        buf = self.momentum_buffers.get(name)
        if buf is None:
            buf = self.momentum_buffers[name] = array("d", bytes(8 * param.numel))
        return buf


def lr_at(epoch: int, tc: TrainConfig) -> float:
    """Learning rate for a 1-indexed epoch under the step schedule."""
    if not 1 <= epoch <= tc.epochs:
        raise ContractError(f"epoch {epoch} outside [1, {tc.epochs}]")
    drops = sum(1 for e in tc.decay_epochs if epoch >= e)
    return tc.base_lr / (tc.decay_factor ** drops)


def sgd_step(
    params: dict[str, Tensor], state: TrainState, lr: float, tc: TrainConfig
) -> None:
    """p -= lr * buf where buf = momentum * buf + (grad + wd * p)."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
        buf = state.buffer_for(name, p)
        backend.active.sgd_update(
            p.numel, p.data, p.grad, buf, lr, tc.momentum, tc.weight_decay
        )
    state.step += 1


@dataclass
class EpochMetrics:
    epoch: int
    steps: int
    lr: float
    loss: float
    train_acc: float
    val_acc: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} steps={self.steps} lr={self.lr:.6g} "
            f"loss={self.loss:.6f} train_acc={self.train_acc:.4f} val_acc={self.val_acc:.4f}"
        )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_epoch: int
    best_val_acc: float
    metrics: list[EpochMetrics]

    def log_text(self) -> str:
        return "".join(m.line() + "\n" for m in self.metrics)


def _center_clip(video: StoredVideo, cfg: ModelConfig):
    t0 = (video.frames - cfg.n_frames) // 2
    y0 = (video.height - cfg.height) // 2
    x0 = (video.width - cfg.width) // 2
    return extract_clip(video, cfg, t0, y0, x0)


def _argmax(values) -> int:
    best, best_i = values[0], 0
    for i in range(1, len(values)):
        if values[i] > best:
            best, best_i = values[i], i
    return best_i


def quick_accuracy(model: VideoTransformer, videos: list[StoredVideo]) -> float:
    """Single center clip, single forward per video; the cheap train-time monitor."""
    if not videos:
        raise DataError("cannot evaluate on an empty split")
    hits = 0
    for v in videos:
        logits = model.forward(_center_clip(v, model.cfg))
        if _argmax(logits.data) == v.label:
            hits += 1
    return hits / len(videos)


def train(
    model: VideoTransformer,
    dataset: Dataset,
    tc: TrainConfig,
    *,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Epoch loop: shuffle, sample a clip per item, accumulate per-batch
    gradients (sum in sample-index order), step with the scheduled rate.

    Validation uses the deterministic center clip; the checkpoint returned
    is the one with the best (earliest on ties) validation accuracy.
    """
    train_videos = dataset.split("train")
    val_videos = dataset.split("val")
    if not train_videos:
        raise DataError("dataset has no training items")
    if tc.batch_size > len(train_videos):
        raise DataError(
            f"batch size {tc.batch_size} exceeds training split of {len(train_videos)}"
        )
    params = model.parameters()
    state = TrainState()
    rng = random.Random(f"{tc.seed}:train")
    metrics: list[EpochMetrics] = []
    best_val = -1.0
    best_epoch = 0
    best_params: dict[str, Tensor] = {
        name: p.copy() for name, p in params.items()
    }
    for epoch in range(1, tc.epochs + 1):
        state.epoch = epoch
        lr = lr_at(epoch, tc)
        order = list(range(len(train_videos)))
        rng.shuffle(order)
        epoch_loss = 0.0
        epoch_hits = 0
        epoch_steps = 0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start : start + tc.batch_size]
            zero_grads(params.values())
            batch_loss = 0.0
            for vi in batch:
                video = train_videos[vi]
                clip = sample_training_clip(video, model.cfg, rng)
                with Tape() as tape:
                    logits = model.forward(clip)
                    loss = scale(
                        cross_entropy(reshape(logits, (1, model.cfg.num_classes)), [clip.label]),
                        1.0 / len(batch),
                    )
                if not math.isfinite(loss.item()):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {state.step} item {video.video_id}"
                    )
                backward(loss, tape)
                batch_loss += loss.item() * len(batch)
                if _argmax(logits.data) == clip.label:
                    epoch_hits += 1
            sgd_step(params, state, lr, tc)
            epoch_loss += batch_loss / len(batch)
            epoch_steps += 1
        val_acc = quick_accuracy(model, val_videos) if val_videos else 0.0
        m = EpochMetrics(
            epoch=epoch,
            steps=epoch_steps,
            lr=lr,
            loss=epoch_loss / epoch_steps,
            train_acc=epoch_hits / len(order),
            val_acc=val_acc,
        )
        metrics.append(m)
        if log is not None:
            log(m.line())
        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_params = {name: p.copy() for name, p in params.items()}
    if not val_videos:
        # No validation split: ship the final parameters.
        best_params = {name: p.copy() for name, p in params.items()}
        best_epoch = tc.epochs
        best_val = 0.0
    ckpt = Checkpoint(config=model.cfg, params=best_params)
    return TrainResult(
        checkpoint=ckpt, best_epoch=best_epoch, best_val_acc=best_val, metrics=metrics
    )
