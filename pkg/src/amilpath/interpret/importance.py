"""Which morphometric feature does an attention MIL model rely on?

Every slide becomes a bag of eight instances, one per nucleus feature: the
slide's mean patch histogram of that feature, tagged with a one-hot feature
id. A small shared projector embeds each instance, attention pooling weighs
them, and a linear head predicts the label. The attention weight a slide
puts on each feature is compared between classes with Mann-Whitney U.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.model_selection import StratifiedKFold
from torch import nn

from ..mil_core import AttentionPooling
from ..stats_eval import mann_whitney_u
from .nuclei import FEATURES

log = logging.getLogger(__name__)

MODES = ("weights", "raw")


class FeatureAttentionMIL(nn.Module):
    def __init__(self, bins, n_features=len(FEATURES), proj_dim=16, hidden_dim=16, n_classes=2):
        super().__init__()
        self.n_features = n_features
        self.projector = nn.Sequential(nn.Linear(bins + n_features, proj_dim), nn.Tanh())
        self.attention = AttentionPooling(proj_dim, hidden_dim)
        self.classifier = nn.Linear(proj_dim, n_classes)

    def forward(self, x):
        # x: B x n_features x (bins + n_features)
        pooled, w = self.attention(self.projector(x))
        return self.classifier(pooled), w


def instance_matrix(bags):
    """B x 8 x (bins + 8): mean patch histogram per feature with a one-hot feature tag."""
    hist = np.stack([b.slide_histograms() for b in bags])
    tags = np.broadcast_to(np.eye(hist.shape[1]), (len(bags),) + (hist.shape[1],) * 2)
    return torch.as_tensor(np.concatenate([hist, tags], axis=-1), dtype=torch.float32)


def fit_feature_attention(bags, labels, seed=0, epochs=300, lr=1e-2, weight_decay=1e-4, **kw):
    torch.manual_seed(seed)
    x = instance_matrix(bags)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    model = FeatureAttentionMIL(x.shape[-1] - x.shape[1], x.shape[1], **kw)
    opt = torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    for epoch in range(epochs):
        logits, _ = model(x)
        loss = F.cross_entropy(logits, y)
        if not torch.isfinite(loss):
            norms = {n: float(p.norm()) for n, p in model.named_parameters()}
            raise FloatingPointError(
                f"feature-attention training diverged at epoch {epoch}: loss={float(loss)}, "
                f"input finite={bool(torch.isfinite(x).all())}, parameter norms={norms}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.final_loss_ = float(loss.detach())
    return model


def attention_weights(model, bags):
    model.eval()
    with torch.no_grad():
        _, w = model(instance_matrix(bags))
    return w.numpy()


def cross_fitted_weights(bags, labels, n_folds=5, seed=0, **fit_kw):
    """Per-slide feature weights, each from a model that never saw that slide."""
    labels = np.asarray(labels)
    n_folds = min(n_folds, np.bincount(labels).min())
    if n_folds < 2:
        raise ValueError("need at least 2 slides per class")
    out = np.zeros((len(bags), len(bags[0].matrices)))
    folds = StratifiedKFold(n_folds, shuffle=True, random_state=seed)
    for k, (tr, te) in enumerate(folds.split(np.zeros(len(labels)), labels)):
        model = fit_feature_attention([bags[i] for i in tr], labels[tr], seed=seed + k, **fit_kw)
        out[te] = attention_weights(model, [bags[i] for i in te])
    return out


def raw_feature_scores(bags):
    """Per-slide mean bin position of every feature histogram (monotone in the feature mean)."""
    hist = np.stack([b.slide_histograms() for b in bags])
    return hist @ np.arange(hist.shape[-1], dtype=float)


def holm(p):
    p = np.asarray(p, dtype=float)
    order = np.argsort(p)
    m = len(p)
    adj = np.maximum.accumulate((m - np.arange(m)) * p[order])
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


@dataclass
class ImportanceReport:
    features: tuple
    mean_weight: np.ndarray  # (n_features,) over all slides
    class_mean_weight: np.ndarray  # (2, n_features)
    p_values: np.ndarray
    p_adjusted: np.ndarray
    slide_weights: np.ndarray  # (n_slides, n_features)
    mode: str = "weights"
    p_adjust: str = "holm"
    diagnostics: dict = field(default_factory=dict)

    @property
    def ranking(self):
        return [self.features[i] for i in np.argsort(-self.mean_weight, kind="stable")]

    @property
    def top_feature(self):
        return self.ranking[0]

    def reported_p(self):
        return self.p_adjusted if self.p_adjust != "none" else self.p_values

    def summary(self):
        """``name (p = 0.009), ...`` in feature order."""
        return ", ".join(f"{f} (p = {p:.3f})" for f, p in zip(self.features, self.reported_p()))

    def render(self):
        lines = [f"{'feature':<16}{'weight':>8}{'N0':>8}{'N+':>8}{'p':>9}{'p_' + self.p_adjust:>10}"]
        for i, f in enumerate(self.features):
            lines.append(
                f"{f:<16}{self.mean_weight[i]:>8.3f}{self.class_mean_weight[0, i]:>8.3f}"
                f"{self.class_mean_weight[1, i]:>8.3f}{self.p_values[i]:>9.3f}{self.p_adjusted[i]:>10.3f}"
            )
        return "\n".join(lines)

    def to_dict(self):
        return {
            "features": list(self.features),
            "mode": self.mode,
            "p_adjust": self.p_adjust,
            "ranking": self.ranking,
            "mean_weight": self.mean_weight.tolist(),
            "class_mean_weight": {"N0": self.class_mean_weight[0].tolist(),
                                  "N+": self.class_mean_weight[1].tolist()},
            "p_values": self.p_values.tolist(),
            "p_adjusted": self.p_adjusted.tolist(),
            "diagnostics": self.diagnostics,
        }


def rank_feature_importance(bags, labels=None, mode="weights", n_folds=5, seed=0,
                            p_adjust="holm", **fit_kw):
    """Per-feature attention weights and class-comparison p-values.

    ``mode="weights"`` tests the cross-fitted per-slide attention weights;
    ``mode="raw"`` tests the per-slide feature distributions directly.
    ``p_adjust`` is ``"holm"`` (family-wise over the features) or ``"none"``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if p_adjust not in ("holm", "none"):
        raise ValueError("p_adjust must be 'holm' or 'none'")
    labels = np.asarray([b.label for b in bags] if labels is None else labels, dtype=int)
    labels = (labels > 0).astype(int)
    counts = np.bincount(labels, minlength=2)
    if counts.min() < 2:
        raise ValueError(f"need >= 2 slides per class, got {counts.tolist()}")
    weights = cross_fitted_weights(bags, labels, n_folds, seed, **fit_kw)
    tested = weights if mode == "weights" else raw_feature_scores(bags)
    p = np.array([mann_whitney_u(tested[labels == 1, f], tested[labels == 0, f]).p_value
                  for f in range(weights.shape[1])])
    class_mean = np.stack([weights[labels == c].mean(axis=0) for c in (0, 1)])
    report = ImportanceReport(
        features=tuple(bags[0].feature_names),
        mean_weight=weights.mean(axis=0),
        class_mean_weight=class_mean,
        p_values=p,
        p_adjusted=holm(p) if p_adjust == "holm" else p.copy(),
        slide_weights=weights,
        mode=mode,
        p_adjust=p_adjust,
        diagnostics={"n_slides": len(bags), "class_counts": counts.tolist()},
    )
    log.info("feature ranking: %s", report.ranking)
    return report
