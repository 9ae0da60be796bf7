"""Per-stratum metrics with an unpaired DeLong comparison between strata."""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .metrics import MetricsReport, binary_metrics, format_report_cells, HEADER
from .roc import delong_unpaired

MIN_STRATUM = 10


def _age_group(age):
    return np.where(np.asarray(age, dtype=float) <= 50, "Yes", "No")


# characteristic name -> (clinical column, value mapper or None)
DEFAULT_GROUPINGS = {
    "Age <= 50": ("age", _age_group),
    "T stage": ("t_stage", None),
    "ER": ("er", None),
    "PR": ("pr", None),
    "HER2": ("her2", None),
}


@dataclass
class SubgroupResult:
    characteristic: str
    strata: dict = field(default_factory=dict)  # value -> MetricsReport
    skipped: dict = field(default_factory=dict)  # value -> reason
    p_value: float | None = None

    def to_dict(self):
        return {
            "characteristic": self.characteristic,
            "strata": {k: v.to_dict() for k, v in self.strata.items()},
            "skipped": dict(self.skipped),
            "p_value": self.p_value,
        }


def subgroup_report(predictions, clinical, groupings=None, cohort="I-T", threshold=0.5):
    """Metrics per stratum of each grouping.

    ``predictions`` needs columns slide_id, score, label (a ``pred`` column is
    derived from ``threshold`` if absent); ``clinical`` is keyed by slide_id.
    ``groupings`` maps a display name to ``(column, mapper)`` where mapper
    turns raw column values into stratum labels (``None`` = identity).

    Strata smaller than 10 slides or lacking a class are skipped with a
    reason. When exactly two strata survive, ``p_value`` is the unpaired
    DeLong z-test of their AUCs.
    """
    groupings = DEFAULT_GROUPINGS if groupings is None else groupings
    df = pd.DataFrame(predictions).merge(pd.DataFrame(clinical), on="slide_id", how="inner")
    if "pred" not in df:
        df["pred"] = (df["score"] >= threshold).astype(int)
    results = []
    for name, (column, mapper) in groupings.items():
        keys = mapper(df[column]) if mapper is not None else df[column].astype(str).to_numpy()
        res = SubgroupResult(name)
        for value in pd.unique(keys):
            sub = df[keys == value]
            labels = sub["label"].to_numpy(int)
            if len(sub) < MIN_STRATUM:
                res.skipped[str(value)] = f"only {len(sub)} slides"
                continue
            if labels.min() == labels.max():
                res.skipped[str(value)] = "single class"
                continue
            res.strata[str(value)] = binary_metrics(
                sub["pred"].to_numpy(int), labels, scores=sub["score"].to_numpy(float), cohort=cohort
            )
        if len(res.strata) == 2:
            (a, b) = res.strata
            sa, sb = df[keys == a], df[keys == b]
            cmp = delong_unpaired(sa["score"], sa["label"], sb["score"], sb["label"])
            res.p_value = cmp.p_value
        results.append(res)
    return results


def render_subgroups(results):
    """Aligned text mirroring the subgroup table: characteristic, value, cohort, metrics, p."""
    header = ["Characteristics", "Value", ""] + HEADER + ["p"]
    rows = []
    for res in results:
        for i, (value, report) in enumerate(res.strata.items()):
            p = f"{res.p_value:.4f}" if (i == 0 and res.p_value is not None) else ""
            rows.append([res.characteristic if i == 0 else "", value, report.cohort]
                        + format_report_cells(report) + [p])
    widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + rows
    ) + "\n"
