"""Two-group comparisons: Mann-Whitney U and Pearson chi-square."""

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np
from scipy import stats

from .roc import midrank

EXACT_MAX_N = 8


@dataclass
class TestResult:
    statistic: float
    p_value: float
    method: str
    degenerate: bool = False

    def __iter__(self):
        # allows ``u, p = mann_whitney_u(x, y)``
        yield self.statistic
        yield self.p_value


def _u_from_ranks(ranks, n1):
    return ranks[:n1].sum() - n1 * (n1 + 1) / 2.0


def _exact_u_distribution(ranks, n1):
    """Null distribution of U over every split of the pooled ranks (ties kept)."""
    n = len(ranks)
    doubled = np.rint(2 * ranks).astype(np.int64)
    offset = n1 * (n1 + 1)
    values = np.fromiter(
        (doubled[list(idx)].sum() - offset for idx in combinations(range(n), n1)),
        dtype=np.int64,
        count=comb(n, n1),
    )
    return values  # 2U, kept integral to avoid float ties


def mann_whitney_u(x, y, method="auto"):
    """Two-sided Mann-Whitney U test; U is reported for the first sample.

    ``method="auto"`` uses exact enumeration when both samples have at most
    8 observations and the tie-corrected normal approximation otherwise.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    n1, n2 = len(x), len(y)
    if n1 < 1 or n2 < 1:
        raise ValueError("both samples need at least one observation")
    ranks = midrank(np.r_[x, y])
    u = _u_from_ranks(ranks, n1)
    if np.all(ranks == ranks[0]):
        return TestResult(float(u), 1.0, "all-tied", degenerate=True)
    if method == "auto":
        method = "exact" if max(n1, n2) <= EXACT_MAX_N else "asymptotic"

    mean_u = n1 * n2 / 2.0
    if method == "exact":
        dist2 = _exact_u_distribution(ranks, n1)
        dev2 = np.abs(dist2 - 2 * mean_u)
        obs2 = abs(2 * u - 2 * mean_u)
        # tolerance guards the comparison of half-integer deviations
        p = float(np.mean(dev2 >= obs2 - 1e-9))
        return TestResult(float(u), min(1.0, p), "exact")
    if method != "asymptotic":
        raise ValueError(f"unknown method {method!r}")

    n = n1 + n2
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = np.sum(counts**3 - counts) / (n * (n - 1))
    sigma = np.sqrt(n1 * n2 / 12.0 * ((n + 1) - tie_term))
    # continuity correction
    z = (abs(u - mean_u) - 0.5) / sigma
    p = float(min(1.0, 2.0 * stats.norm.sf(max(z, 0.0))))
    return TestResult(float(u), p, "asymptotic")


def chi_square(table):
    """Pearson chi-square test of independence for an r x c count table."""
    obs = np.asarray(table, dtype=float)
    if obs.ndim != 2 or np.any(obs < 0) or np.any(obs != np.rint(obs)):
        raise ValueError("table must be a 2-D array of non-negative integers")
    obs = obs[obs.sum(axis=1) > 0][:, obs.sum(axis=0) > 0]
    if obs.shape[0] < 2 or obs.shape[1] < 2:
        return TestResult(0.0, 1.0, "pearson", degenerate=True)
    expected = np.outer(obs.sum(axis=1), obs.sum(axis=0)) / obs.sum()
    chi2 = float(np.sum((obs - expected) ** 2 / expected))
    df = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return TestResult(chi2, float(stats.chi2.sf(chi2, df)), "pearson")
