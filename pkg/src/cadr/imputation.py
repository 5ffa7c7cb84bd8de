"""Pseudo-label imputation with class-aware acceptance thresholds.

Pseudo-labels and confidences come from weakly augmented probabilities; the
loss is charged against strongly augmented logits. A pseudo-label is accepted
when its confidence strictly exceeds tau(x) = tau_o * (prior[c] / max prior)^beta,
so classes the prior considers rare face a lower bar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import P_HI, P_LO, cross_entropy, cross_entropy_grad, softmax
from .propensity import ClassPrior


@dataclass
class ImputedLabel:
    pseudo_class: int
    confidence: float
    accepted: bool | None = None


@dataclass
class ThresholdConfig:
    tau_o: float
    beta: float

    def __post_init__(self):
        if not 0 < self.tau_o <= 1:
            raise ConfigError("tau_o must be in (0, 1]")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")


def argmax_confidence(weak_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector form of impute(): (pseudo classes, confidences). Ties pick the lowest index."""
    weak_probs = np.asarray(weak_probs, dtype=np.float64)
    if weak_probs.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    classes = np.argmax(weak_probs, axis=1)
    return classes, weak_probs[np.arange(len(classes)), classes]


def impute(weak_probs: np.ndarray) -> list[ImputedLabel]:
    """Pseudo-label each row; acceptance is decided later against thresholds."""
    classes, conf = argmax_confidence(weak_probs)
    return [ImputedLabel(int(c), float(p)) for c, p in zip(classes, conf)]


def class_thresholds(prior: ClassPrior, cfg: ThresholdConfig) -> np.ndarray:
    """Per-class tau_o * (prior[c] / max prior)^beta; in (0, tau_o] by construction."""
    probs = np.clip(prior.probs, P_LO, None)
    ratio = probs / probs.max()
    return cfg.tau_o * ratio**cfg.beta


def class_aware_threshold(prior: ClassPrior, pseudo_class: int, cfg: ThresholdConfig) -> float:
    if not 0 <= pseudo_class < prior.probs.shape[0]:
        raise ConfigError(f"pseudo_class {pseudo_class} out of range")
    return float(class_thresholds(prior, cfg)[pseudo_class])


def cai_loss(unlabeled_strong_logits: np.ndarray, imputed: list[ImputedLabel],
             thresholds: np.ndarray, labeled_probs: np.ndarray,
             labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Class-aware imputation loss, mean over the whole batch (labeled + unlabeled).

    Accepted unlabeled samples contribute cross-entropy against their
    pseudo-label; rejected ones contribute exactly zero (value and gradient).
    Labeled samples contribute plain cross-entropy. Returns the scalar plus
    upstream gradient rows for the unlabeled strong logits and the labeled
    logits, each already scaled by 1/N.
    """
    unlabeled_strong_logits = np.asarray(unlabeled_strong_logits)
    labeled_probs = np.asarray(labeled_probs, dtype=np.float64)
    b_u = unlabeled_strong_logits.shape[0]
    b_l = labeled_probs.shape[0]
    if len(imputed) != b_u:
        raise ConfigError("one imputed label per unlabeled row required")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.shape != (b_u,):
        raise ConfigError("one threshold per unlabeled row required")
    n = b_u + b_l
    if n == 0:
        raise ConfigError("cai_loss needs a non-empty batch")

    if b_u:
        pseudo = np.array([im.pseudo_class for im in imputed], dtype=np.int64)
        conf = np.array([im.confidence for im in imputed], dtype=np.float64)
        accepted = conf > thresholds
        strong_probs = softmax(unlabeled_strong_logits)
        unlab_values = cross_entropy(strong_probs, pseudo) * accepted
        grad_unlabeled = cross_entropy_grad(strong_probs, pseudo) * accepted[:, None] / n
    else:
        unlab_values = np.zeros(0)
        grad_unlabeled = np.zeros((0, labeled_probs.shape[1] if b_l else 0))

    if b_l:
        lab_values = cross_entropy(labeled_probs, labels)
        grad_labeled = cross_entropy_grad(labeled_probs, labels) / n
    else:
        lab_values = np.zeros(0)
        grad_labeled = np.zeros((0, unlabeled_strong_logits.shape[1]))

    loss = (unlab_values.sum() + lab_values.sum()) / n
    return float(loss), grad_unlabeled, grad_labeled
