"""ROC curves, AUC, and DeLong variance / comparison."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .._validation import check_scores_labels


def midrank(x):
    """Ranks starting at 1 with ties given the average of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    n = len(x)
    ranks_sorted = np.empty(n, dtype=float)
    i = 0
    while i < n:
        j = i
        while j < n and sorted_x[j] == sorted_x[i]:
            j += 1
        ranks_sorted[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    ranks = np.empty(n, dtype=float)
    ranks[order] = ranks_sorted
    return ranks


def roc_auc(scores, labels):
    """Area under the ROC curve; ties count one half.

    Computed from the rank-sum of the positives, which is algebraically the
    concordant-pair count plus half the tied pairs.
    """
    scores, labels = check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = midrank(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """ROC operating points, one per distinct threshold, plus the (0, 0) origin.

    Returns ``(fpr, tpr, thresholds)``; a case is called positive when its
    score is >= the threshold.
    """
    scores, labels = check_scores_labels(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    distinct = np.where(np.diff(s))[0]
    idx = np.r_[distinct, y.size - 1]
    tps = np.cumsum(y)[idx]
    fps = (idx + 1) - tps
    tpr = np.r_[0.0, tps / y.sum()]
    fpr = np.r_[0.0, fps / (y.size - y.sum())]
    thresholds = np.r_[np.inf, s[idx]]
    return fpr, tpr, thresholds


def _placements(scores, labels):
    """Structural components of the AUC for positives and negatives."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    m, n = len(pos), len(neg)
    r_all = midrank(np.r_[pos, neg])
    r_pos = midrank(pos)
    r_neg = midrank(neg)
    v10 = (r_all[:m] - r_pos) / n
    v01 = 1.0 - (r_all[m:] - r_neg) / m
    auc = v10.mean()
    return auc, v10, v01


def delong_covariance(score_sets, labels):
    """AUCs and their DeLong covariance matrix for k score vectors on the same cases."""
    score_sets = [np.asarray(s, dtype=float) for s in score_sets]
    for s in score_sets:
        check_scores_labels(s, labels)
    labels = np.asarray(labels).astype(int)
    parts = [_placements(s, labels) for s in score_sets]
    aucs = np.array([p[0] for p in parts])
    v10 = np.vstack([p[1] for p in parts])
    v01 = np.vstack([p[2] for p in parts])
    m, n = v10.shape[1], v01.shape[1]
    s10 = np.atleast_2d(np.cov(v10, ddof=1)) if m > 1 else np.zeros((len(aucs),) * 2)
    s01 = np.atleast_2d(np.cov(v01, ddof=1)) if n > 1 else np.zeros((len(aucs),) * 2)
    cov = s10 / m + s01 / n
    return aucs, cov


def delong_variance(scores, labels):
    aucs, cov = delong_covariance([scores], labels)
    return float(aucs[0]), float(cov[0, 0])


def delong_ci(scores, labels, level=0.95):
    """Normal-theory AUC interval with DeLong standard error, clipped to [0, 1]."""
    auc, var = delong_variance(scores, labels)
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(max(var, 0.0))
    return max(0.0, auc - half), min(1.0, auc + half)


@dataclass
class DelongResult:
    auc_a: float
    auc_b: float
    var_a: float
    var_b: float
    cov_ab: float
    z: float
    p_value: float
    degenerate: bool = False

    def to_dict(self):
        return asdict(self)


def _z_test(diff, var):
    if var <= 0 or not np.isfinite(var):
        if diff == 0:
            return 0.0, 1.0, True
        return float("nan"), float("nan"), True
    z = diff / np.sqrt(var)
    return float(z), float(min(1.0, 2.0 * stats.norm.sf(abs(z)))), False


def delong_compare(scores_a, scores_b, labels):
    """Two-sided DeLong test for two correlated AUCs (paired cases).

    When the variance of the difference is zero the p-value is undefined;
    ``degenerate`` is set and ``p_value`` is 1.0 if the AUCs coincide, NaN
    otherwise.
    """
    aucs, cov = delong_covariance([scores_a, scores_b], labels)
    var = cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1]
    z, p, degenerate = _z_test(aucs[0] - aucs[1], var)
    return DelongResult(
        auc_a=float(aucs[0]),
        auc_b=float(aucs[1]),
        var_a=float(cov[0, 0]),
        var_b=float(cov[1, 1]),
        cov_ab=float(cov[0, 1]),
        z=z,
        p_value=p,
        degenerate=degenerate,
    )


def delong_unpaired(scores_a, labels_a, scores_b, labels_b):
    """AUC comparison for independent samples: z = (A - B) / sqrt(Va + Vb)."""
    auc_a, var_a = delong_variance(scores_a, labels_a)
    auc_b, var_b = delong_variance(scores_b, labels_b)
    z, p, degenerate = _z_test(auc_a - auc_b, var_a + var_b)
    return DelongResult(auc_a, auc_b, var_a, var_b, 0.0, z, p, degenerate)
