"""SGD with momentum, plateau learning-rate schedule, training loop and repeated evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .data import ClassWeights, PatchRecord, compute_class_weights, make_batch
from .metrics import ConfusionCounts, MetricSummary, compute_metrics
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

# stream tags keep training and evaluation randomness disjoint
_TRAIN_STREAM = 1
_EVAL_STREAM = 2


class NonFiniteLossError(NumericError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    lr_factor: float = 0.1
    plateau_patience: int = 10
    epochs: int = 100
    batch_size: int = 32
    class_weights: Optional[ClassWeights] = None
    input_size: int = 32
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be at least 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.input_size not in (32, 64):
            raise ValueError("input_size must be 32 or 64")


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
                      lr: float, momentum: float) -> None:
    """In-place heavy-ball update: v <- momentum * v + g; w <- w - lr * v."""
    for w, g, v in zip(params, grads, velocity):
        if w.shape != g.shape or w.shape != v.shape:
            raise ValueError(f"shape mismatch: param {w.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        w -= lr * v


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_momentum_step([p.data for p in self.params], grads, self.velocity, lr, self.momentum)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a new best loss."""

    def __init__(self, init_lr: float, factor: float = 0.1, patience: int = 10):
        self.init_lr = init_lr
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.stagnant = 0
        self.reductions = 0

    @property
    def lr(self) -> float:
        return self.init_lr * self.factor ** self.reductions

    def step(self, epoch_loss: float) -> float:
        if epoch_loss < self.best:
            self.best = epoch_loss
            self.stagnant = 0
        else:
            self.stagnant += 1
            if self.stagnant >= self.patience:
                self.reductions += 1
                self.stagnant = 0
        return self.lr


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float
    accuracy: float


@dataclass
class TrainResult:
    history: List[EpochRecord] = field(default_factory=list)
    class_weights: Optional[ClassWeights] = None


def _rngs(seed: int, stream: int, step: int, indices: Sequence[int]) -> List[np.random.Generator]:
    return [np.random.default_rng([seed, stream, step, int(i)]) for i in indices]


def train(model, records: Sequence[PatchRecord], cfg: TrainConfig,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Train ``model`` in place on ``records`` (already restricted to the training split)."""
    records = list(records)
    if not records:
        raise ValueError("empty training set")
    weights = cfg.class_weights or compute_class_weights(records)
    w_by_label = weights.by_label()
    params = [t for _, t in model.parameters()]
    opt = SGD(params, cfg.momentum)
    sched = PlateauScheduler(cfg.learning_rate, cfg.lr_factor, cfg.plateau_patience)
    result = TrainResult(class_weights=weights)

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        model.train()
        order = np.random.default_rng([cfg.seed, _TRAIN_STREAM, epoch]).permutation(len(records))
        loss_sum = weight_sum = 0.0
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [records[i] for i in idx]
            x, y = make_batch(batch, _rngs(cfg.seed, _TRAIN_STREAM, epoch, idx), cfg.input_size, cfg.augment)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = model(Tensor(x))
                    loss = ops.weighted_cross_entropy(logits, y, w_by_label)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise NumericError("loss is not finite")
                    opt.zero_grad()
                    loss.backward()
                    opt.step(lr)
            except NumericError as exc:
                raise NonFiniteLossError(f"epoch {epoch}, batch starting at {start}: {exc}") from exc
            bw = float(w_by_label[y].sum())
            loss_sum += value * bw
            weight_sum += bw
            correct += int((logits.data.argmax(axis=1) == y).sum())
        epoch_loss = loss_sum / weight_sum
        rec = EpochRecord(epoch, epoch_loss, lr, time.perf_counter() - t0, correct / len(records))
        result.history.append(rec)
        sched.step(epoch_loss)
        log.info("epoch %d loss %.5f lr %g acc %.3f (%.1fs)", epoch, epoch_loss, lr, rec.accuracy, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
    return result


def predict(model, x: np.ndarray) -> np.ndarray:
    return model(Tensor(x)).data.argmax(axis=1)


def evaluate_repeated(model, records: Sequence[PatchRecord], repeats: int = 20, input_size: int = 32,
                      seed: int = 0, batch_size: int = 64) -> MetricSummary:
    """Score ``repeats`` independent random square crops of every test ROI."""
    records = list(records)
    if not records:
        raise ValueError("empty test set")
    if hasattr(model, "eval"):
        model.eval()
    y_true = np.array([r.label for r in records])
    runs, counts = [], []
    for run in range(repeats):
        preds = []
        for start in range(0, len(records), batch_size):
            idx = range(start, min(start + batch_size, len(records)))
            x, _ = make_batch([records[i] for i in idx], _rngs(seed, _EVAL_STREAM, run, idx), input_size, False)
            preds.append(predict(model, x))
        c = ConfusionCounts.from_predictions(y_true, np.concatenate(preds))
        counts.append(c)
        runs.append(compute_metrics(c))
    return MetricSummary(runs, counts)
