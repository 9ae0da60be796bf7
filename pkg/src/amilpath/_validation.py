"""Input validation helpers shared by the estimators."""

import numpy as np


def check_binary_labels(labels, name="labels"):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {labels.shape}")
    uniq = np.unique(labels)
    if not np.all(np.isin(uniq, [0, 1])):
        raise ValueError(f"{name} must be binary 0/1, got values {uniq.tolist()}")
    return labels.astype(int)


def check_scores_labels(scores, labels, require_both=True):
    """Validate a (scores, binary labels) pair and return them as arrays."""
    scores = np.asarray(scores, dtype=float)
    labels = check_binary_labels(labels)
    if scores.shape != labels.shape:
        raise ValueError(
            f"scores and labels differ in shape: {scores.shape} vs {labels.shape}"
        )
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    if require_both and (labels.sum() == 0 or labels.sum() == labels.size):
        raise ValueError("both classes must be present in labels")
    return scores, labels


def check_probability_matrix(probs, atol=1e-6):
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.ndim != 2:
        raise ValueError(f"expected a 2-D probability matrix, got shape {probs.shape}")
    if np.any(probs < -atol) or not np.allclose(probs.sum(axis=1), 1.0, atol=atol):
        raise ValueError("rows must be valid probability distributions")
    return probs


def check_instances(x, name="bag"):
    """A bag of instances: at least one row, finite values."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim < 2:
        raise ValueError(f"{name} must have an instance axis plus features, got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} has no instances")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
