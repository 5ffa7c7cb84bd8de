"""Confusion-matrix metrics. GM accuracy is the geometric mean of per-class recalls."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def confusion(predictions: np.ndarray, truths: np.ndarray, class_count: int) -> np.ndarray:
    """rows = true class, columns = predicted class."""
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape:
        raise ConfigError("predictions and truths must have the same length")
    if class_count < 2:
        raise ConfigError("class_count must be >= 2")
    for name, arr in (("predictions", predictions), ("truths", truths)):
        if arr.size and (arr.min() < 0 or arr.max() >= class_count):
            raise ConfigError(f"{name} out of range for class_count {class_count}")
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(cm, (truths, predictions), 1)
    return cm


def mean_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise ConfigError("empty confusion matrix")
    return float(np.trace(cm) / total)


def per_class_recall(cm: np.ndarray) -> np.ndarray:
    row_sums = cm.sum(axis=1)
    if np.any(row_sums == 0):
        missing = int(np.flatnonzero(row_sums == 0)[0])
        raise ConfigError(f"class {missing} has no true samples; recall undefined")
    return np.diag(cm) / row_sums


def gm_accuracy(cm: np.ndarray) -> float:
    """Geometric mean of recalls, in log space; exactly 0 if any class collapses."""
    recalls = per_class_recall(cm)
    if np.any(recalls == 0):
        return 0.0
    return float(np.exp(np.mean(np.log(recalls))))


def metrics_dict(cm: np.ndarray) -> dict:
    """JSON-ready summary of a confusion matrix."""
    return {
        "mean_acc": mean_accuracy(cm),
        "gm_acc": gm_accuracy(cm),
        "per_class_recall": [float(r) for r in per_class_recall(cm)],
        "confusion": cm.astype(int).tolist(),
    }
