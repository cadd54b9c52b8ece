"""Evaluation metrics with their brute-force pair-counting twins."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "MetricError",
    "accuracy",
    "auc",
    "auc_bruteforce",
    "multiclass_auc",
    "c_index",
    "c_index_bruteforce",
    "MetricsReport",
]


class MetricError(ValueError):
    pass


def accuracy(preds, labels) -> float:
    """``preds`` is ``(n, n_classes)`` scores or ``(n,)`` hard labels; argmax ties go to the lower index."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if len(preds) == 0:
        raise MetricError("accuracy of an empty set")
    if len(preds) != len(labels):
        raise MetricError(f"length mismatch: {len(preds)} predictions, {len(labels)} labels")
    hard = preds.argmax(axis=1) if preds.ndim == 2 else preds
    return float(np.mean(hard == labels))


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if len(scores) != len(labels):
        raise MetricError(f"length mismatch: {len(scores)} scores, {len(labels)} labels")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise MetricError("AUC undefined: only one class present")
    return scores, labels


def auc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos n_neg) from midranks."""
    scores, labels = _binary(scores, labels)
    ranks = rankdata(scores)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    scores, labels = _binary(scores, labels)
    pos, neg = scores[labels], scores[~labels]
    wins = ties = 0
    for a in pos:
        for b in neg:
            wins += a > b
            ties += a == b
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def multiclass_auc(probs, labels) -> float:
    """Binary AUC on the positive-class column; macro one-vs-rest beyond two classes."""
    probs, labels = np.asarray(probs, dtype=np.float64), np.asarray(labels)
    if probs.ndim == 1 or probs.shape[1] == 1:
        return auc(probs.ravel(), labels)
    if probs.shape[1] == 2:
        return auc(probs[:, 1], labels == 1)
    present = [k for k in range(probs.shape[1]) if 0 < np.sum(labels == k) < len(labels)]
    if not present:
        raise MetricError("AUC undefined: only one class present")
    return float(np.mean([auc(probs[:, k], labels == k) for k in present]))


def _survival_inputs(risks, times, events):
    risks = np.asarray(risks, dtype=np.float64).ravel()
    times = np.asarray(times, dtype=np.float64).ravel()
    events = np.asarray(events).ravel().astype(bool)
    if not len(risks) == len(times) == len(events):
        raise MetricError("risks, times and events must have equal length")
    if np.any(times <= 0):
        raise MetricError("times must be positive")
    return risks, times, events


def c_index(risks, times, events) -> float:
    """Harrell's concordance over pairs with ``time_i < time_j`` and event i observed."""
    risks, times, events = _survival_inputs(risks, times, events)
    comparable = (times[:, None] < times[None, :]) & events[:, None]
    n = comparable.sum()
    if n == 0:
        raise MetricError("c-index undefined: no comparable pairs")
    dr = risks[:, None] - risks[None, :]
    credit = (dr > 0) + 0.5 * (dr == 0)
    return float((credit * comparable).sum() / n)


def c_index_bruteforce(risks, times, events) -> float:
    risks, times, events = _survival_inputs(risks, times, events)
    num = den = 0.0
    for i in range(len(risks)):
        if not events[i]:
            continue
        for j in range(len(risks)):
            if times[i] < times[j]:
                den += 1
                num += 1.0 if risks[i] > risks[j] else 0.5 if risks[i] == risks[j] else 0.0
    if den == 0:
        raise MetricError("c-index undefined: no comparable pairs")
    return num / den


@dataclass
class MetricsReport:
    """Per-fold metric values and their mean and population std."""

    per_fold: dict[str, list[float]] = field(default_factory=dict)

    def add(self, **values: float) -> None:
        for k, v in values.items():
            v = float(v)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{k}={v} outside [0, 1]")
            self.per_fold.setdefault(k, []).append(v)

    def mean(self, key: str) -> float:
        return float(np.mean(self.per_fold[key]))

    def std(self, key: str) -> float:
        return float(np.std(self.per_fold[key]))

    @property
    def acc(self) -> float | None:
        return self.mean("acc") if "acc" in self.per_fold else None

    @property
    def auc(self) -> float | None:
        return self.mean("auc") if "auc" in self.per_fold else None

    @property
    def c_index(self) -> float | None:
        return self.mean("c_index") if "c_index" in self.per_fold else None

    def summary(self) -> str:
        lines = []
        for k, vals in self.per_fold.items():
            folds = " ".join(f"{v:.6f}" for v in vals)
            if len(vals) > 1:
                lines.append(f"{k}\t{self.mean(k):.6f} ± {self.std(k):.6f}\tfolds: {folds}")
            else:
                lines.append(f"{k}\t{self.mean(k):.6f}\tfolds: {folds}")
        return "\n".join(lines)

    def as_dict(self) -> dict[str, list[float]]:
        return {k: list(v) for k, v in self.per_fold.items()}
