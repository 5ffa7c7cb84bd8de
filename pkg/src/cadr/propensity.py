"""Class-aware propensity weighting.

The labeling propensity of a sample is modeled from the classifier itself:
s = log P(y|x) / (log P(y|x) - log P(y)), where P(y) is an exponential moving
average of batch class marginals. Weighting supervised cross-entropy by 1/s
collapses algebraically to -log P(y|x) + log P(y), which is the form cap_loss
computes; the raw score is still exposed because the doubly robust correction
needs it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import P_HI, P_LO, cross_entropy_grad

# Propensity denominators smaller than this mean P(y|x) and P(y) coincide;
# such samples get zero inverse weight and an infinite score sentinel.
DENOM_EPS = 1e-12


@dataclass
class ClassPrior:
    """EMA estimate of the class marginal P(y). Detached: never differentiated."""

    probs: np.ndarray
    momentum: float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1 or self.probs.shape[0] < 2:
            raise ConfigError("prior needs at least two classes")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ConfigError("prior probabilities must lie on the simplex")


def uniform_prior(class_count: int, momentum: float) -> ClassPrior:
    if class_count < 2:
        raise ConfigError("class_count must be >= 2")
    return ClassPrior(np.full(class_count, 1.0 / class_count), momentum)


def batch_class_marginal(probs: np.ndarray) -> np.ndarray:
    """Column mean of a (B, C) matrix of softmax rows from the full batch."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ConfigError("batch_class_marginal needs a non-empty (B, C) matrix")
    return probs.mean(axis=0)


def update_prior(prior: ClassPrior, batch_marginal: np.ndarray) -> ClassPrior:
    """One EMA step: mu * prior + (1 - mu) * marginal, renormalized exactly."""
    marginal = np.asarray(batch_marginal, dtype=np.float64)
    if marginal.shape != prior.probs.shape:
        raise ConfigError("marginal shape does not match the prior")
    mixed = prior.momentum * prior.probs + (1.0 - prior.momentum) * marginal
    total = mixed.sum()
    if abs(total - 1.0) > 1e-9:
        raise ConfigError("marginal is not on the simplex; prior would drift")
    return ClassPrior(mixed / total, prior.momentum)


@dataclass
class PropensityScore:
    value: float
    inverse_weight: float


def propensity_score(p_y_given_x: float, p_hat_y: float) -> PropensityScore:
    """Score one (sample, label) pair; inputs must already be clamped.

    Returns value = log p / (log p - log p_hat) and its reciprocal. When the
    two probabilities coincide (|denominator| <= 1e-12) the inverse weight is
    0 and the value is the +inf sentinel: such samples carry no propensity
    information. Note the value is negative whenever p > p_hat.
    """
    for name, v in (("p_y_given_x", p_y_given_x), ("p_hat_y", p_hat_y)):
        if not P_LO <= v <= P_HI:
            raise ConfigError(f"{name}={v!r} outside the clamped range [{P_LO}, {P_HI}]")
    log_p = np.log(p_y_given_x)
    denom = log_p - np.log(p_hat_y)
    if abs(denom) <= DENOM_EPS:
        return PropensityScore(value=np.inf, inverse_weight=0.0)
    return PropensityScore(value=float(log_p / denom), inverse_weight=float(denom / log_p))


def inverse_weights(p_y_given_x: np.ndarray, p_hat_y: np.ndarray) -> np.ndarray:
    """Vectorized 1/score with the zero-denominator convention; clamps inputs itself."""
    log_p = np.log(np.clip(np.asarray(p_y_given_x, dtype=np.float64), P_LO, P_HI))
    denom = log_p - np.log(np.clip(np.asarray(p_hat_y, dtype=np.float64), P_LO, P_HI))
    return np.where(np.abs(denom) <= DENOM_EPS, 0.0, denom / log_p)


def cap_terms(labeled_probs: np.ndarray, labels: np.ndarray,
              prior: ClassPrior) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample propensity-weighted loss values and their d/d(logits) rows.

    The value is -log P(y|x) + log P_hat(y) (probabilities clamped); only the
    first term is differentiated, so the gradient rows are plain cross-entropy
    rows and the prior stays detached.
    """
    labeled_probs = np.asarray(labeled_probs, dtype=np.float64)
    labels = np.asarray(labels)
    p_y = np.clip(labeled_probs[np.arange(len(labels)), labels], P_LO, P_HI)
    p_hat = np.clip(prior.probs[labels], P_LO, P_HI)
    values = -np.log(p_y) + np.log(p_hat)
    grads = cross_entropy_grad(labeled_probs, labels)
    return values, grads


def cap_loss(labeled_probs: np.ndarray, labels: np.ndarray,
             prior: ClassPrior) -> tuple[float, np.ndarray]:
    """Mean propensity-weighted supervised loss over the labeled samples.

    Returns (scalar, upstream gradient rows) where backward() applied to the
    rows yields the gradient of the scalar.
    """
    if len(labels) == 0:
        raise ConfigError("cap_loss needs at least one labeled sample")
    values, grads = cap_terms(labeled_probs, labels, prior)
    return float(values.mean()), grads / len(labels)
