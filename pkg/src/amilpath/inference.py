"""Slide-level predictions from per-bag outputs."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .ingest import LABELS

AGGREGATIONS = ("mean", "max", "median")


@dataclass
class SlidePrediction:
    slide_id: str
    class_probs: np.ndarray
    predicted_label: int
    bag_probs: np.ndarray
    bag_ids: list = field(default_factory=list)

    @property
    def n_bags(self):
        return len(self.bag_probs)


def aggregate(bag_probs, method="mean", logits=None):
    """Combine per-bag class probabilities into one renormalized vector.

    With ``logits`` given (same shape), the logits are averaged and passed
    through a softmax instead; only ``mean`` is defined for that mode.
    """
    if logits is not None:
        if method != "mean":
            raise ValueError("logit merging only supports mean aggregation")
        z = np.asarray(logits, dtype=float).mean(axis=0)
        e = np.exp(z - z.max())
        return e / e.sum()
    p = np.atleast_2d(np.asarray(bag_probs, dtype=float))
    if p.shape[0] == 0:
        raise ValueError("no bags to aggregate")
    if method == "mean":
        agg = p.mean(axis=0)
    elif method == "max":
        agg = p.max(axis=0)
    elif method == "median":
        agg = np.median(p, axis=0)
    else:
        raise ValueError(f"unknown aggregation {method!r}; choose from {AGGREGATIONS}")
    return agg / agg.sum()


def decide(class_probs, threshold=0.5):
    """Binary: positive iff p(positive) >= threshold. Ternary: argmax."""
    class_probs = np.asarray(class_probs)
    if len(class_probs) == 2:
        return int(class_probs[1] >= threshold)
    return int(np.argmax(class_probs))


def predict_slide(slide_ids, bag_probs, aggregation="mean", threshold=0.5, bag_logits=None, bag_ids=None):
    """Aggregate the bags of one slide.

    ``slide_ids`` holds the slide id of every bag; they must all agree.
    """
    ids = set(slide_ids)
    if len(ids) != 1:
        raise ValueError(f"bags from several slides passed to predict_slide: {sorted(ids)}")
    bag_probs = np.atleast_2d(np.asarray(bag_probs, dtype=float))
    probs = aggregate(bag_probs, aggregation, logits=bag_logits)
    return SlidePrediction(ids.pop(), probs, decide(probs, threshold), bag_probs, list(bag_ids or []))


def predict_slides(bags, bag_probs, aggregation="mean", threshold=0.5, bag_logits=None):
    """Group bags by slide (first-seen order) and aggregate each group."""
    groups = {}
    for i, b in enumerate(bags):
        groups.setdefault(b.slide_id, []).append(i)
    out = []
    for sid, idx in groups.items():
        out.append(predict_slide(
            [sid] * len(idx),
            np.asarray(bag_probs)[idx],
            aggregation,
            threshold,
            None if bag_logits is None else np.asarray(bag_logits)[idx],
            [bags[i].bag_id for i in idx],
        ))
    return out


def probability_columns(n_classes):
    if n_classes == 2:
        return ["p_N0", "p_pos"]
    return [f"p_{name}" for name in LABELS[:n_classes]]


def write_predictions(path, predictions):
    if not predictions:
        raise ValueError("no predictions to write")
    k = len(predictions[0].class_probs)
    cols = probability_columns(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id"] + cols + ["label", "n_bags"])
        for p in predictions:
            w.writerow([p.slide_id] + [f"{v:.8f}" for v in p.class_probs] + [p.predicted_label, p.n_bags])


def read_predictions(path):
    import pandas as pd

    return pd.read_csv(path, dtype={"slide_id": str})
