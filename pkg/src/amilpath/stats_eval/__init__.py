from .confusion import ALN_CLASSES, ConfusionReport, confusion_3class, confusion_from_matrix
from .hypothesis_tests import TestResult, chi_square, mann_whitney_u
from .logistic import ClinicalLogisticRegression, fit_logistic
from .metrics import MetricsReport, Rate, binary_metrics, clopper_pearson, render_table
from .roc import (
    DelongResult,
    delong_ci,
    delong_compare,
    delong_covariance,
    delong_unpaired,
    midrank,
    roc_auc,
    roc_curve,
)
from .subgroups import SubgroupResult, render_subgroups, subgroup_report

__all__ = [
    "ALN_CLASSES",
    "ClinicalLogisticRegression",
    "ConfusionReport",
    "DelongResult",
    "MetricsReport",
    "Rate",
    "SubgroupResult",
    "TestResult",
    "binary_metrics",
    "chi_square",
    "clopper_pearson",
    "confusion_3class",
    "confusion_from_matrix",
    "delong_ci",
    "delong_compare",
    "delong_covariance",
    "delong_unpaired",
    "fit_logistic",
    "mann_whitney_u",
    "midrank",
    "render_subgroups",
    "render_table",
    "roc_auc",
    "roc_curve",
    "subgroup_report",
]
