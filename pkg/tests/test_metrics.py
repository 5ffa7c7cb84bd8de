"""Confusion matrices, mean accuracy, and geometric-mean accuracy."""

import numpy as np
import pytest

from cadr.errors import ConfigError
from cadr.metrics import (
    confusion,
    gm_accuracy,
    mean_accuracy,
    metrics_dict,
    per_class_recall,
)


def test_confusion_perfect_predictions_diagonal():
    y = np.array([0, 1, 2, 0, 1, 2])
    cm = confusion(y, y, 3)
    np.testing.assert_array_equal(cm, np.diag([2, 2, 2]))


def test_confusion_single_off_diagonal():
    cm = confusion(np.array([0]), np.array([1]), 2)
    expected = np.zeros((2, 2), dtype=np.int64)
    expected[1, 0] = 1
    np.testing.assert_array_equal(cm, expected)


def test_confusion_row_sums_are_true_histogram():
    rng = np.random.default_rng(0)
    truths = rng.integers(0, 7, 1000)
    preds = rng.integers(0, 7, 1000)
    cm = confusion(preds, truths, 7)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(truths, minlength=7))
    np.testing.assert_array_equal(cm.sum(axis=0), np.bincount(preds, minlength=7))
    assert cm.sum() == 1000


def test_confusion_rejects_out_of_range():
    with pytest.raises(ConfigError):
        confusion(np.array([0, 3]), np.array([0, 1]), 3)
    with pytest.raises(ConfigError):
        confusion(np.array([0]), np.array([0, 1]), 2)


def test_mean_accuracy_cases():
    assert mean_accuracy(np.diag([5, 5, 5])) == 1.0
    # Everything predicted as class 0 over balanced truths.
    cm = np.zeros((10, 10), dtype=np.int64)
    cm[:, 0] = 4
    np.testing.assert_allclose(mean_accuracy(cm), 0.1, atol=1e-15)
    np.testing.assert_allclose(mean_accuracy(np.array([[3, 1], [1, 3]])), 0.75,
                               atol=1e-15)
    with pytest.raises(ConfigError):
        mean_accuracy(np.zeros((2, 2), dtype=np.int64))


def test_gm_accuracy_cases():
    assert gm_accuracy(np.diag([7, 2, 9])) == 1.0
    # Recalls (1.0, 0.25) -> sqrt(0.25) = 0.5 exactly.
    cm = np.array([[4, 0], [3, 1]])
    assert gm_accuracy(cm) == 0.5
    # A collapsed class zeroes the whole metric, no smoothing.
    cm = np.array([[4, 0], [4, 0]])
    assert gm_accuracy(cm) == 0.0


def test_per_class_recall_cases():
    np.testing.assert_array_equal(per_class_recall(np.diag([3, 4])), [1.0, 1.0])
    np.testing.assert_array_equal(per_class_recall(np.array([[0, 2], [0, 2]])),
                                  [0.0, 1.0])
    with pytest.raises(ConfigError):
        per_class_recall(np.array([[0, 0], [1, 1]]))


def test_gm_matches_recall_recomputation():
    rng = np.random.default_rng(1)
    for _ in range(20):
        cm = rng.integers(1, 50, (5, 5))
        recalls = per_class_recall(cm)
        np.testing.assert_allclose(gm_accuracy(cm),
                                   np.exp(np.mean(np.log(recalls))), atol=1e-12)


def test_gm_between_min_and_max_recall():
    rng = np.random.default_rng(2)
    for _ in range(20):
        cm = rng.integers(1, 50, (6, 6))
        recalls = per_class_recall(cm)
        gm = gm_accuracy(cm)
        assert recalls.min() - 1e-12 <= gm <= recalls.max() + 1e-12
    # Equality with the arithmetic mean iff all recalls equal.
    cm = np.diag([3, 3]) + 3
    recalls = per_class_recall(cm)
    assert np.allclose(recalls, recalls[0])
    np.testing.assert_allclose(gm_accuracy(cm), recalls.mean(), atol=1e-12)


def test_metrics_invariant_under_class_permutation():
    rng = np.random.default_rng(3)
    truths = rng.integers(0, 5, 400)
    preds = rng.integers(0, 5, 400)
    perm = rng.permutation(5)
    cm = confusion(preds, truths, 5)
    cm_p = confusion(perm[preds], perm[truths], 5)
    np.testing.assert_allclose(mean_accuracy(cm), mean_accuracy(cm_p), atol=1e-15)
    np.testing.assert_allclose(gm_accuracy(cm), gm_accuracy(cm_p), atol=1e-12)


def test_metrics_dict_shape():
    cm = confusion(np.array([0, 1, 1]), np.array([0, 1, 0]), 2)
    d = metrics_dict(cm)
    assert set(d) == {"mean_acc", "gm_acc", "per_class_recall", "confusion"}
    assert isinstance(d["per_class_recall"], list)
    assert d["confusion"][0][0] == 1
