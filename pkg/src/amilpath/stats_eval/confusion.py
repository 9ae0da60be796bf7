from dataclasses import dataclass

import numpy as np

ALN_CLASSES = ("N0", "N+(1-2)", "N+(>=3)")


@dataclass
class ConfusionReport:
    matrix: np.ndarray  # rows = truth, columns = prediction
    precision: np.ndarray
    recall: np.ndarray
    class_names: tuple

    def render(self, digits=3):
        names = self.class_names
        width = max(len(n) for n in names) + 2
        lines = ["truth \\ pred".ljust(width + 4) + "".join(n.rjust(width) for n in names)]
        for name, row in zip(names, self.matrix):
            lines.append(name.ljust(width + 4) + "".join(str(int(v)).rjust(width) for v in row))
        lines.append("")
        lines.append("class".ljust(width + 4) + "precision".rjust(11) + "recall".rjust(9))
        for name, p, r in zip(names, self.precision, self.recall):
            lines.append(name.ljust(width + 4) + f"{p:.{digits}f}".rjust(11) + f"{r:.{digits}f}".rjust(9))
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            "classes": list(self.class_names),
            "matrix": self.matrix.astype(int).tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
        }


def confusion_from_matrix(matrix, class_names=ALN_CLASSES):
    m = np.asarray(matrix, dtype=np.int64)
    diag = np.diag(m).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(m.sum(axis=0) > 0, diag / m.sum(axis=0), np.nan)
        recall = np.where(m.sum(axis=1) > 0, diag / m.sum(axis=1), np.nan)
    return ConfusionReport(m, precision, recall, tuple(class_names))


def confusion_3class(preds, labels, class_names=ALN_CLASSES):
    """Confusion matrix for integer-coded classes 0..k-1 plus per-class precision/recall."""
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    k = len(class_names)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have the same length")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} must be integer class codes in [0, {k})")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return confusion_from_matrix(m, class_names)
