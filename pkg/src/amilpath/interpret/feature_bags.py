"""Per-patch morphometry histograms stacked into one matrix per feature."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .nuclei import FEATURES

ORIENTATION_RANGE = (-90.0, 90.0)


@dataclass
class SlideMorphometry:
    """Nucleus feature values of one slide, grouped by patch.

    ``patches[j]`` is an (n_nuclei x 8) array in ``FEATURES`` order; a patch
    without nuclei is a (0 x 8) array.
    """

    slide_id: str
    patches: list
    origins: list = field(default_factory=list)
    label: int | None = None

    @classmethod
    def from_records(cls, slide_id, per_patch_records, origins=(), label=None):
        patches = [np.array([r.values() for r in recs], dtype=float).reshape(-1, len(FEATURES))
                   for recs in per_patch_records]
        return cls(slide_id, patches, list(origins), label)


@dataclass
class NucleusFeatureBag:
    slide_id: str
    matrices: np.ndarray  # (n_features, n_patches, bins)
    zero_rows: np.ndarray  # (n_patches,) bool: patch without nuclei
    label: int | None = None
    feature_names: tuple = FEATURES

    def __len__(self):
        return len(self.matrices)

    def matrix(self, name):
        return self.matrices[self.feature_names.index(name)]

    def slide_histograms(self):
        """(n_features, bins) mean histogram over the patches that contain nuclei."""
        keep = ~self.zero_rows
        if not keep.any():
            return np.zeros(self.matrices.shape[::2])
        return self.matrices[:, keep, :].mean(axis=1)


class NucleusHistogramTransformer(TransformerMixin, BaseEstimator):
    """Quantize per-patch nucleus features into fixed-range histograms.

    ``fit`` freezes, per feature, the range spanned by the 1st and 99th
    percentiles over every nucleus of the training slides; values outside it
    fall into the edge bins. Orientation always uses its full axial range.
    """

    def __init__(self, bins=10, lower_pct=1.0, upper_pct=99.0):
        self.bins = bins
        self.lower_pct = lower_pct
        self.upper_pct = upper_pct

    def fit(self, X, y=None):
        values = [p for slide in X for p in slide.patches if len(p)]
        if not values:
            raise ValueError("no nuclei in the fitting slides")
        allv = np.vstack(values)
        lo = np.percentile(allv, self.lower_pct, axis=0)
        hi = np.percentile(allv, self.upper_pct, axis=0)
        k = FEATURES.index("orientation")
        lo[k], hi[k] = ORIENTATION_RANGE
        flat = hi - lo <= 0
        lo[flat] -= 0.5
        hi[flat] += 0.5
        self.ranges_ = np.c_[lo, hi]
        self.n_features_in_ = len(FEATURES)
        return self

    def histogram_rows(self, values, feature):
        """One normalized ``bins``-wide row per patch from that patch's values."""
        lo, hi = self.ranges_[feature]
        idx = np.floor((np.asarray(values, dtype=float) - lo) / (hi - lo) * self.bins)
        idx = np.clip(idx, 0, self.bins - 1).astype(int)
        row = np.bincount(idx, minlength=self.bins).astype(float)
        return row / row.sum() if row.sum() else row

    def transform_one(self, slide):
        check_is_fitted(self, "ranges_")
        n = len(slide.patches)
        mats = np.zeros((len(FEATURES), n, self.bins))
        zero = np.zeros(n, dtype=bool)
        for j, vals in enumerate(slide.patches):
            if len(vals) == 0:
                zero[j] = True
                continue
            for f in range(len(FEATURES)):
                mats[f, j] = self.histogram_rows(vals[:, f], f)
        return NucleusFeatureBag(slide.slide_id, mats, zero, slide.label)

    def transform(self, X):
        return [self.transform_one(s) for s in X]

    def get_feature_names_out(self, input_features=None):
        return np.array([f"{f}_bin{b}" for f in FEATURES for b in range(self.bins)])

    def to_dict(self):
        check_is_fitted(self, "ranges_")
        return {"bins": self.bins, "lower_pct": self.lower_pct, "upper_pct": self.upper_pct,
                "features": list(FEATURES), "ranges": self.ranges_.tolist()}

    @classmethod
    def from_dict(cls, d):
        t = cls(d["bins"], d["lower_pct"], d["upper_pct"])
        t.ranges_ = np.asarray(d["ranges"], dtype=float)
        t.n_features_in_ = len(FEATURES)
        return t


def build_feature_bags(train_slides, slides=None, bins=10):
    """Fit ranges on ``train_slides`` and histogram ``slides`` (default: the same)."""
    t = NucleusHistogramTransformer(bins=bins).fit(train_slides)
    return t.transform(train_slides if slides is None else slides), t


def save_feature_bags(path, bags, transformer=None):
    """``<path>.npz`` with the arrays plus ``<path>.json`` describing each entry."""
    path = Path(path).with_suffix("")
    arrays, index = {}, []
    for i, b in enumerate(bags):
        arrays[f"m{i}"] = b.matrices
        arrays[f"z{i}"] = b.zero_rows
        index.append({"key": i, "slide_id": b.slide_id, "label": b.label,
                      "n_patches": int(b.matrices.shape[1]), "zero_rows": int(b.zero_rows.sum())})
    np.savez_compressed(path.with_suffix(".npz"), **arrays)
    meta = {"features": list(FEATURES), "slides": index}
    if transformer is not None:
        meta["histogram"] = transformer.to_dict()
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    return path.with_suffix(".npz"), path.with_suffix(".json")


def load_feature_bags(path):
    path = Path(path).with_suffix("")
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    with np.load(path.with_suffix(".npz")) as z:
        bags = [NucleusFeatureBag(e["slide_id"], z[f"m{e['key']}"], z[f"z{e['key']}"], e["label"])
                for e in meta["slides"]]
    transformer = NucleusHistogramTransformer.from_dict(meta["histogram"]) if "histogram" in meta else None
    return bags, transformer


def measure_slide(slide_id, patches, label=None, segmenter=None, max_patches=None, seed=0):
    """Segment and measure nuclei in ``patches`` (RGB arrays or image paths).

    ``patches`` maps patch origin -> image. With ``max_patches`` a seeded
    random subset is measured. Returns the SlideMorphometry and the nucleus
    rows ``(slide_id, origin, NucleusRecord)``.
    """
    from ..ingest import load_patch
    from .nuclei import patch_morphometry

    origins = list(patches)
    if max_patches is not None and len(origins) > max_patches:
        rng = np.random.default_rng(seed)
        keep = sorted(rng.choice(len(origins), max_patches, replace=False))
        origins = [origins[i] for i in keep]
    per_patch, rows = [], []
    for o in origins:
        img = patches[o]
        img = load_patch(img) if isinstance(img, (str, Path)) else img
        recs, _ = patch_morphometry(img, segmenter)
        per_patch.append(recs)
        rows.extend((slide_id, o, r) for r in recs)
    return SlideMorphometry.from_records(slide_id, per_patch, origins, label), rows
