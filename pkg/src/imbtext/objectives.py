"""Label-smoothed cross-entropy and classification metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import Tensor


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def smoothed_targets(targets: np.ndarray, num_classes: int, epsilon: float) -> np.ndarray:
    """q = (1 - eps) * onehot + eps / C."""
    q = np.full((len(targets), num_classes), epsilon / num_classes)
    q[np.arange(len(targets)), targets] += 1.0 - epsilon
    return q


def label_smoothed_ce(logits: Tensor, target, epsilon: float = 0.1) -> Tensor:
    """Mean label-smoothed cross-entropy over a batch.

    ``logits`` is (C,) with an int target, or (B, C) with B targets. The
    gradient with respect to each row of logits is softmax(logits) - q
    (divided by B for the batch mean).
    """
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"smoothing epsilon must be in [0, 1), got {epsilon}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    single = logits.ndim == 1
    Z = logits.data[None, :] if single else logits.data
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if Z.ndim != 2 or Z.shape[1] == 0:
        raise ShapeError(f"logits must be (C,) or (B, C), got {logits.shape}")
    B, C = Z.shape
    if len(targets) != B:
        raise ShapeError(f"{len(targets)} targets for {B} rows of logits")
    if (targets < 0).any() or (targets >= C).any():
        raise IndexError(f"target out of range for {C} classes: {targets.tolist()}")
    q = smoothed_targets(targets, C, epsilon)
    logp = log_softmax(Z)
    loss = -(q * logp).sum() / B

    def back(g):
        grad = (np.exp(logp) - q) * (g / B)
        return (grad[0] if single else grad,)

    return Tensor.from_op(np.array(loss), (logits,), back)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_pair(preds, golds) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    g = np.asarray(golds, dtype=np.int64).reshape(-1)
    if p.shape != g.shape:
        raise ShapeError(f"preds has {p.size} items, golds has {g.size}")
    return p, g


def accuracy(preds, golds) -> float:
    p, g = _check_pair(preds, golds)
    if p.size == 0:
        raise ShapeError("accuracy of an empty set is undefined")
    return float((p == g).sum()) / p.size


def confusion_matrix(preds, golds, num_classes: int) -> np.ndarray:
    """Counts with rows = gold class, columns = predicted class."""
    if num_classes <= 0:
        raise ConfigError("num_classes must be positive")
    p, g = _check_pair(preds, golds)
    if ((p < 0) | (p >= num_classes) | (g < 0) | (g >= num_classes)).any():
        raise IndexError(f"class id outside [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (g, p), 1)
    return m


def f1_from_confusion(m: np.ndarray) -> np.ndarray:
    """Per-class F1 with every 0/0 treated as 0."""
    tp = np.diag(m).astype(np.float64)
    pred_tot = m.sum(axis=0).astype(np.float64)
    gold_tot = m.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(gold_tot > 0, tp / gold_tot, 0.0)
        denom = precision + recall
        return np.where(denom > 0, 2 * precision * recall / denom, 0.0)


def macro_f1(preds, golds, num_classes: int) -> tuple[float, list[float]]:
    """Unweighted mean F1 over all ``num_classes``; absent classes score 0."""
    if num_classes <= 0:
        raise ConfigError("num_classes must be positive")
    per_class = f1_from_confusion(confusion_matrix(preds, golds, num_classes))
    return float(per_class.mean()), per_class.tolist()


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list[float]
    confusion: list[list[int]]
    support: list[int]

    @classmethod
    def from_confusion(cls, m: np.ndarray) -> "MetricsReport":
        m = np.asarray(m, dtype=np.int64)
        n = int(m.sum())
        per_class = f1_from_confusion(m)
        return cls(
            accuracy=float(np.trace(m)) / n if n else 0.0,
            macro_f1=float(per_class.mean()),
            per_class_f1=per_class.tolist(),
            confusion=m.tolist(),
            support=m.sum(axis=1).tolist(),
        )

    @classmethod
    def from_predictions(cls, preds, golds, num_classes: int) -> "MetricsReport":
        return cls.from_confusion(confusion_matrix(preds, golds, num_classes))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in ("accuracy", "macro_f1", "per_class_f1", "confusion", "support")})


def merge_confusions(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Shard reduction: sum raw counts, never average per-shard F1."""
    return np.sum(np.stack([np.asarray(p, dtype=np.int64) for p in parts]), axis=0)
