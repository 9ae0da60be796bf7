"""Threshold metrics with exact binomial intervals and the results-table layout."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .._validation import check_binary_labels
from .roc import delong_ci, roc_auc


def clopper_pearson(k, n, alpha=0.05):
    """Exact two-sided binomial interval for k successes out of n.

    Returns ``(lower, upper)``. An empty denominator gives ``(0.0, 1.0)``.
    """
    if n < 0 or k < 0 or k > n:
        raise ValueError(f"invalid binomial counts k={k}, n={n}")
    if n == 0:
        return 0.0, 1.0
    lower = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    upper = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lower, upper


@dataclass
class Rate:
    value: float
    lower: float
    upper: float
    k: int
    n: int
    empty: bool = False


@dataclass
class MetricsReport:
    cohort: str
    n: int
    auc: float | None = None
    auc_ci: tuple[float, float] | None = None
    acc: Rate | None = None
    sens: Rate | None = None
    spec: Rate | None = None
    ppv: Rate | None = None
    npv: Rate | None = None
    flags: list[str] = field(default_factory=list)

    RATE_NAMES = ("acc", "sens", "spec", "ppv", "npv")

    def to_dict(self):
        d = asdict(self)
        d["auc_ci"] = list(self.auc_ci) if self.auc_ci is not None else None
        return d

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for name in cls.RATE_NAMES:
            if d.get(name) is not None:
                d[name] = Rate(**d[name])
        if d.get("auc_ci") is not None:
            d["auc_ci"] = tuple(d["auc_ci"])
        return cls(**d)


def _rate(k, n, alpha):
    if n == 0:
        return Rate(float("nan"), 0.0, 1.0, 0, 0, empty=True)
    lo, hi = clopper_pearson(k, n, alpha)
    return Rate(k / n, lo, hi, int(k), int(n))


def binary_metrics(preds, labels, scores=None, alpha=0.05, cohort=""):
    """ACC/SENS/SPEC/PPV/NPV from the 2x2 table, each with an exact CI.

    If ``scores`` is given the AUC and its DeLong interval are filled in too
    (skipped with a flag when only one class is present).
    """
    preds = check_binary_labels(preds, "preds")
    labels = check_binary_labels(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have the same length")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    report = MetricsReport(
        cohort=cohort,
        n=int(labels.size),
        acc=_rate(tp + tn, labels.size, alpha),
        sens=_rate(tp, tp + fn, alpha),
        spec=_rate(tn, tn + fp, alpha),
        ppv=_rate(tp, tp + fp, alpha),
        npv=_rate(tn, tn + fn, alpha),
    )
    for name in MetricsReport.RATE_NAMES:
        if getattr(report, name).empty:
            report.flags.append(f"{name}: empty denominator")
    if scores is not None:
        if 0 < labels.sum() < labels.size:
            report.auc = roc_auc(scores, labels)
            report.auc_ci = delong_ci(scores, labels, 1 - alpha)
        else:
            report.flags.append("auc: single class")
    return report


def format_interval(value, lower, upper, digits):
    return f"{value:.{digits}f} [{lower:.{digits}f}, {upper:.{digits}f}]"


def format_report_cells(report):
    """Cells of one results-table row: AUC to 3 decimals, rates in percent to 2."""
    cells = []
    if report.auc is None:
        cells.append("NA")
    else:
        cells.append(format_interval(report.auc, *report.auc_ci, digits=3))
    for name in MetricsReport.RATE_NAMES:
        r = getattr(report, name)
        if r is None or r.empty:
            cells.append("NA")
        else:
            cells.append(format_interval(100 * r.value, 100 * r.lower, 100 * r.upper, 2))
    return cells


HEADER = ["AUC", "ACC (%)", "SENS (%)", "SPEC (%)", "PPV (%)", "NPV (%)"]


def render_table(rows, extra_header=("Methods", ""), extra_columns=None):
    """Aligned plain-text table.

    ``rows`` is a list of ``(label_cells, MetricsReport)`` pairs where
    ``label_cells`` fill the leading columns (e.g. method and cohort).
    ``extra_columns`` optionally maps a trailing column name to one value per row.
    """
    header = list(extra_header) + HEADER
    body = []
    for i, (labels, report) in enumerate(rows):
        line = list(labels) + format_report_cells(report)
        if extra_columns:
            for values in extra_columns.values():
                line.append(values[i])
        body.append(line)
    if extra_columns:
        header += list(extra_columns)
    widths = [max(len(str(r[c])) for r in [header] + body) for c in range(len(header))]
    out = []
    for r in [header] + body:
        out.append("  ".join(str(cell).ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(out) + "\n"
