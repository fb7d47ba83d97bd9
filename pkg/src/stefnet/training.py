"""MAE training with Adam, mini-batches and early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, GradientTape, Tensor
from .grid import SampleSet
from .model import ModelParams, forward, load_checkpoint, predict_batch, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    max_epochs: int = 2000
    early_stop_patience: int = 100
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be a finite non-negative number, got {self.learning_rate}")
        for name in ("batch_size", "max_epochs", "early_stop_patience"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"TrainConfig.{name} must be a positive integer, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_reason: str = ""
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = self.epochs
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def mae_loss(pred: Tensor, target) -> Tensor:
    """Batch mean of the per-sample mean absolute cell error."""
    target = target if isinstance(target, Tensor) else Tensor._wrap(np.asarray(target, float), False)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"mae_loss: prediction shape {pred.shape} != target shape {target.shape}")
    # every sample has the same cell count, so the pooled mean equals the mean of per-sample means
    return ad.mean_abs_error(pred, target)


def loss_and_grads(params: ModelParams, E, F, targets) -> tuple[float, dict[str, np.ndarray]]:
    """Train-mode forward and backward on one batch."""
    with GradientTape() as tape:
        pred = forward(params, E, F, "train")
        loss = mae_loss(pred, targets)
    ad.backward(loss, tape, params.tensors.values())
    return float(loss.data), {k: t.grad for k, t in params.tensors.items()}


def train_step(params: ModelParams, state: AdamState, E, F, targets) -> float:
    loss, grads = loss_and_grads(params, E, F, targets)
    if math.isfinite(loss):
        ad.adam_update(params.tensors, grads, state)
    return loss


def validation_loss(params: ModelParams, samples: SampleSet, batch_size: int = 512) -> float:
    pred = predict_batch(params, samples, batch_size=batch_size)
    return float(np.abs(pred - samples.targets).mean())


def train(params: ModelParams, train_set: SampleSet, val_set: SampleSet,
          config: TrainConfig = TrainConfig()) -> tuple[ModelParams, TrainReport]:
    """Fit ``params`` and return the snapshot with the lowest validation MAE.

    The input ``params`` object is left untouched; training works on a copy.
    Every epoch shuffles the training block (seeded), runs all mini-batches
    including a trailing partial one, then scores the validation block in
    inference mode.  Training stops after ``early_stop_patience`` epochs
    without improvement or at ``max_epochs``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    t0 = time.perf_counter()
    work = params.copy()
    state = AdamState.for_params(work.tensors, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    best = work.copy()
    stale = 0
    n = len(train_set)

    for epoch in range(config.max_epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = order[s:s + config.batch_size]
            loss = train_step(work, state, train_set.E[idx], train_set.F[idx], train_set.targets[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {b}")
            total += loss * len(idx)
        report.train_loss.append(total / n)
        val = validation_loss(work, val_set)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        report.val_loss.append(val)
        logger.debug("epoch %d train %.5f val %.5f", epoch, report.train_loss[-1], val)

        if val < report.best_val_loss:
            report.best_val_loss = val
            report.best_epoch = epoch
            best = work.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                report.stopped_reason = "early_stop"
                break
    else:
        report.stopped_reason = "max_epochs"

    best.trained_epochs = report.best_epoch + 1
    report.wall_time = time.perf_counter() - t0
    return best, report


__all__ = [
    "TrainConfig", "TrainReport", "TrainingError", "load_checkpoint", "loss_and_grads",
    "mae_loss", "save_checkpoint", "train", "train_step", "validation_loss",
]
