"""Confusion counts and the four binary classification metrics (cancer = positive)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

METRIC_NAMES = ("recall", "precision", "f1", "accuracy")


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for k in ("tp", "tn", "fp", "fn"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, y_true: Sequence[int], y_pred: Sequence[int]) -> "ConfusionCounts":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(tp=int((t & p).sum()), tn=int((~t & ~p).sum()), fp=int((~t & p).sum()), fn=int((t & ~p).sum()))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass
class Metrics:
    recall: float
    precision: float
    f1: float
    accuracy: float
    degenerate: Tuple[str, ...] = ()

    def as_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def compute_metrics(c: ConfusionCounts) -> Metrics:
    """Recall, precision, F1 and accuracy; zero denominators give 0 and a flag."""
    if c.total == 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    flags: List[str] = []
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    accuracy = (c.tp + c.tn) / c.total
    return Metrics(recall, precision, f1, accuracy, tuple(flags))


@dataclass
class MetricSummary:
    runs: List[Metrics]
    counts: List[ConfusionCounts] = field(default_factory=list)

    def values(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.runs])

    @property
    def mean(self) -> Dict[str, float]:
        return {k: float(np.mean(self.values(k))) for k in METRIC_NAMES}

    @property
    def std(self) -> Dict[str, float]:
        # population standard deviation across runs
        return {k: float(np.std(self.values(k))) for k in METRIC_NAMES}
