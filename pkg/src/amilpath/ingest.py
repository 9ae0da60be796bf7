"""Slide manifests, polygon annotations, clinical tables, tiling and clinical encoding."""

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image
from shapely.geometry import Polygon as _ShapelyPolygon
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

log = logging.getLogger(__name__)

Image.MAX_IMAGE_PIXELS = None

LABELS = ("N0", "N+(1-2)", "N+(>=3)")
_LABEL_ALIASES = {"N+(≥3)": "N+(>=3)", "N+(3+)": "N+(>=3)"}

NUMERIC_COLUMNS = ("age", "tumor_size")
CATEGORICAL_VOCAB = {
    "tumor_type": ("Invasive ductal carcinoma", "Invasive lobular carcinoma", "Other types"),
    "t_stage": ("T1", "T2"),
    "er": ("Positive", "Negative"),
    "pr": ("Positive", "Negative"),
    "her2": ("Positive", "Negative"),
    "molecular_subtype": ("Luminal A", "Luminal B", "Triple negative", "HER2(+)"),
}
CLINICAL_COLUMNS = ("slide_id",) + NUMERIC_COLUMNS + tuple(CATEGORICAL_VOCAB)


class IngestError(ValueError):
    pass


def normalize_label(value):
    if value is None or (isinstance(value, float) and math.isnan(value)) or value == "":
        return None
    value = _LABEL_ALIASES.get(str(value).strip(), str(value).strip())
    if value not in LABELS:
        raise IngestError(f"unknown label {value!r}; expected one of {LABELS}")
    return value


def label_code(label, n_classes=2):
    """N0 -> 0; binary: any N+ -> 1; ternary: N+(1-2) -> 1, N+(>=3) -> 2."""
    idx = LABELS.index(normalize_label(label))
    return min(idx, 1) if n_classes == 2 else idx


@dataclass(frozen=True)
class Polygon:
    vertices: tuple  # ((x, y), ...) level-0 pixels, implicitly closed

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise IngestError("polygon needs at least 3 vertices")
        shape = _ShapelyPolygon(verts)
        if not shape.is_valid:
            raise IngestError("polygon is self-intersecting or degenerate")
        if shape.area <= 0:
            raise IngestError("polygon has zero area")

    @property
    def bounds(self):
        xs, ys = zip(*self.vertices)
        return min(xs), min(ys), max(xs), max(ys)

    def spans_at(self, yc):
        """Inside intervals [x_a, x_b) along the horizontal line y = yc (even-odd rule)."""
        v = np.asarray(self.vertices)
        x1, y1 = v[:, 0], v[:, 1]
        x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
        lo, hi = np.minimum(y1, y2), np.maximum(y1, y2)
        hit = (lo <= yc) & (yc < hi)
        xs = x1[hit] + (yc - y1[hit]) * (x2[hit] - x1[hit]) / (y2[hit] - y1[hit])
        xs.sort()
        return xs.reshape(-1, 2)

    def raster_mask(self, width, height):
        """Pixel (col, row) is inside iff its centre lies inside the polygon."""
        mask = np.zeros((height, width), dtype=bool)
        centres = np.arange(width) + 0.5
        for row in range(height):
            for a, b in self.spans_at(row + 0.5):
                mask[row] |= (centres >= a) & (centres < b)
        return mask


@dataclass
class ClinicalRecord:
    age: float
    tumor_size: float
    tumor_type: str
    t_stage: str
    er: str
    pr: str
    her2: str
    molecular_subtype: str

    def __post_init__(self):
        for name in NUMERIC_COLUMNS:
            val = float(getattr(self, name))
            if not math.isfinite(val) or val <= 0:
                raise IngestError(f"{name} must be finite and positive, got {val}")
            setattr(self, name, val)
        for name, vocab in CATEGORICAL_VOCAB.items():
            if getattr(self, name) not in vocab:
                raise IngestError(f"{name}={getattr(self, name)!r} not in {vocab}")

    def as_dict(self):
        return {c: getattr(self, c) for c in CLINICAL_COLUMNS[1:]}


@dataclass
class SlideRecord:
    slide_id: str
    image_uri: str
    level0_size: tuple
    regions: list
    clinical: ClinicalRecord | None
    label: str | None

    def __post_init__(self):
        w, h = self.level0_size
        for poly in self.regions:
            x0, y0, x1, y1 = poly.bounds
            if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                raise IngestError(f"{self.slide_id}: polygon vertex outside level-0 bounds {w}x{h}")


@dataclass(frozen=True)
class Patch:
    slide_id: str
    origin: tuple  # (x, y) level-0 pixels
    size: int = 256
    path: str | None = None

    def key(self):
        return f"{self.origin[0]}_{self.origin[1]}"


def image_size(uri):
    with Image.open(uri) as im:
        return im.size


def read_annotation(path):
    with open(path) as fh:
        data = json.load(fh)
    return data["slide_id"], [Polygon(tuple(map(tuple, p))) for p in data["polygons"]]


def write_annotation(path, slide_id, polygons):
    polys = [[list(v) for v in (p.vertices if isinstance(p, Polygon) else p)] for p in polygons]
    with open(path, "w") as fh:
        json.dump({"slide_id": slide_id, "polygons": polys}, fh)


def read_clinical_table(path):
    df = pd.read_csv(path, dtype={"slide_id": str})
    missing = [c for c in CLINICAL_COLUMNS if c not in df.columns]
    if missing:
        raise IngestError(f"clinical table {path} lacks columns {missing}")
    if df["slide_id"].duplicated().any():
        dup = df.loc[df["slide_id"].duplicated(), "slide_id"].tolist()
        raise IngestError(f"duplicate slide_id in clinical table: {dup}")
    records = {}
    for row in df.itertuples(index=False):
        d = row._asdict()
        try:
            records[d["slide_id"]] = ClinicalRecord(**{c: d[c] for c in CLINICAL_COLUMNS[1:]})
        except IngestError as exc:
            raise IngestError(f"clinical row {d['slide_id']}: {exc}") from None
    return records


def load_manifest(manifest_path, annotation_dir, clinical_path=None, strict=True, read_sizes=True):
    """Join manifest rows with their annotation JSON and clinical record.

    Rows missing annotations or clinical data raise an ``IngestError`` listing
    the offending ids; with ``strict=False`` they are skipped and logged.
    ``clinical_path=None`` loads image-only records.
    """
    manifest_path, annotation_dir = Path(manifest_path), Path(annotation_dir)
    for p in (manifest_path, annotation_dir) + ((Path(clinical_path),) if clinical_path else ()):
        if not p.exists():
            raise FileNotFoundError(p)
    clinical = read_clinical_table(clinical_path) if clinical_path else None

    with open(manifest_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    seen, records = set(), []
    no_annotation, no_clinical = [], []
    for row in rows:
        sid = row["slide_id"]
        if sid in seen:
            raise IngestError(f"duplicate slide_id in manifest: {sid}")
        seen.add(sid)
        ann_path = annotation_dir / f"{sid}.json"
        if not ann_path.exists():
            no_annotation.append(sid)
            continue
        if clinical is not None and sid not in clinical:
            no_clinical.append(sid)
            continue
        uri = row["image_uri"]
        if not Path(uri).is_absolute():
            uri = str((manifest_path.parent / uri).resolve())
        _, polygons = read_annotation(ann_path)
        if read_sizes and Path(uri).exists():
            size = image_size(uri)
        else:
            size = (row.get("width") and int(row["width"]), row.get("height") and int(row["height"]))
            if not all(size):
                size = (math.inf, math.inf)
        records.append(SlideRecord(
            slide_id=sid,
            image_uri=uri,
            level0_size=size,
            regions=polygons,
            clinical=clinical[sid] if clinical is not None else None,
            label=normalize_label(row.get("label")),
        ))
    problems = []
    if no_annotation:
        problems.append(f"no annotation for {no_annotation}")
    if no_clinical:
        problems.append(f"no clinical record for {no_clinical}")
    if problems:
        msg = "; ".join(problems)
        if strict:
            raise IngestError(msg)
        log.warning("skipping manifest rows: %s", msg)
    return records


def tile_polygon(polygon, patch_size=256):
    """Origins of grid cells lying fully inside one polygon's raster mask, row-major.

    The grid is anchored at the integer-floored top-left of the polygon's
    bounding box.
    """
    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    x0, y0, x1, y1 = polygon.bounds
    gx, gy = math.floor(x0), math.floor(y0)
    n_cols = int((math.ceil(x1) - gx) // patch_size)
    n_rows = int((math.ceil(y1) - gy) // patch_size)
    if n_cols == 0 or n_rows == 0:
        return []
    cell_x = gx + patch_size * np.arange(n_cols)
    origins = []
    for r in range(n_rows):
        top = gy + r * patch_size
        ok = np.ones(n_cols, dtype=bool)
        for row in range(top, top + patch_size):
            spans = polygon.spans_at(row + 0.5)
            if len(spans) == 0:
                ok[:] = False
                break
            # first and last pixel centres of every cell must share one span
            first, last = cell_x + 0.5, cell_x + patch_size - 0.5
            idx = np.searchsorted(spans[:, 0], first, side="right") - 1
            valid = idx >= 0
            idx = np.clip(idx, 0, len(spans) - 1)
            ok &= valid & (last < spans[idx, 1])
            if not ok.any():
                break
        origins.extend((int(x), int(top)) for x in cell_x[ok])
    return origins


def tile_tumor_regions(record, patch_size=256):
    """Non-overlapping patches covering the annotated regions of one slide.

    Cells from different polygons that would overlap an already emitted
    patch are dropped, so the result is pairwise disjoint.
    """
    if not record.regions:
        raise IngestError(f"{record.slide_id}: no annotated regions")
    taken = []
    for poly in record.regions:
        for ox, oy in tile_polygon(poly, patch_size):
            if any(abs(ox - tx) < patch_size and abs(oy - ty) < patch_size for tx, ty in taken):
                continue
            taken.append((ox, oy))
    taken.sort(key=lambda o: (o[1], o[0]))
    if not taken:
        warnings.warn(f"{record.slide_id}: no {patch_size}px cell fits inside any region")
    return [Patch(record.slide_id, o, patch_size) for o in taken]


def read_region(image, origin, size):
    x, y = origin
    return np.asarray(image.crop((x, y, x + size, y + size)).convert("RGB"))


def extract_patches(record, patches, out_dir):
    """Write each patch as ``<out_dir>/<slide_id>/<x>_<y>.png``; returns patches with paths."""
    slide_dir = Path(out_dir) / record.slide_id
    slide_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with Image.open(record.image_uri) as im:
        for p in patches:
            path = slide_dir / f"{p.key()}.png"
            Image.fromarray(read_region(im, p.origin, p.size)).save(path, compress_level=1)
            written.append(Patch(p.slide_id, p.origin, p.size, str(path)))
    return written


def load_patch(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def list_patches(patch_dir, slide_id):
    """Patches previously written for a slide, in row-major order."""
    out = []
    for p in Path(patch_dir, slide_id).glob("*.png"):
        x, y = map(int, p.stem.split("_"))
        with Image.open(p) as im:
            size = im.size[0]
        out.append(Patch(slide_id, (x, y), size, str(p)))
    out.sort(key=lambda q: (q.origin[1], q.origin[0]))
    return out


class ClinicalEncoder(TransformerMixin, BaseEstimator):
    """Standardize numeric clinical columns and one-hot the categorical ones.

    Vocabularies are closed, so the output width is the same for every
    cohort: ``len(numeric) + sum(len(v) for v in vocab.values())``. Mean and
    variance come from the cohort passed to ``fit`` only.
    """

    def __init__(self, numeric=NUMERIC_COLUMNS, vocab=None):
        self.numeric = numeric
        self.vocab = vocab

    def _frame(self, X):
        if isinstance(X, pd.DataFrame):
            return X
        rows = [r.as_dict() if isinstance(r, ClinicalRecord) else dict(r) for r in X]
        return pd.DataFrame(rows)

    @property
    def vocab_(self):
        return CATEGORICAL_VOCAB if self.vocab is None else self.vocab

    def fit(self, X, y=None):
        df = self._frame(X)
        if len(df) == 0:
            raise ValueError("cannot fit the clinical encoder on an empty cohort")
        values = df[list(self.numeric)].to_numpy(float)
        self.mean_ = values.mean(axis=0)
        self.scale_ = values.std(axis=0)
        self.zero_variance_ = [c for c, s in zip(self.numeric, self.scale_) if s == 0]
        if self.zero_variance_:
            warnings.warn(f"zero-variance clinical columns encoded as zeros: {self.zero_variance_}")
        self.feature_names_out_ = list(self.numeric) + [
            f"{col}={v}" for col, vocab in self.vocab_.items() for v in vocab
        ]
        self.n_features_out_ = len(self.feature_names_out_)
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        df = self._frame(X)
        values = df[list(self.numeric)].to_numpy(float)
        safe = np.where(self.scale_ > 0, self.scale_, 1.0)
        num = np.where(self.scale_ > 0, (values - self.mean_) / safe, 0.0)
        blocks = [num]
        for col, vocab in self.vocab_.items():
            vals = df[col].astype(str).to_numpy()
            unseen = sorted(set(vals) - set(vocab))
            if unseen:
                raise IngestError(f"unseen {col} categories at transform time: {unseen}")
            blocks.append((vals[:, None] == np.asarray(vocab)[None, :]).astype(float))
        return np.hstack(blocks)

    def inverse_transform_numeric(self, Z):
        """Recover the numeric columns from an encoded matrix."""
        check_is_fitted(self, "mean_")
        Z = np.asarray(Z, dtype=float)
        k = len(self.numeric)
        return Z[:, :k] * self.scale_ + self.mean_

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "feature_names_out_")
        return np.asarray(self.feature_names_out_, dtype=object)

    def to_dict(self):
        check_is_fitted(self, "mean_")
        return {
            "numeric": list(self.numeric),
            "vocab": {k: list(v) for k, v in self.vocab_.items()},
            "mean": self.mean_.tolist(),
            "scale": self.scale_.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        enc = cls(numeric=tuple(d["numeric"]), vocab={k: tuple(v) for k, v in d["vocab"].items()})
        enc.mean_ = np.asarray(d["mean"], float)
        enc.scale_ = np.asarray(d["scale"], float)
        enc.zero_variance_ = [c for c, s in zip(enc.numeric, enc.scale_) if s == 0]
        enc.feature_names_out_ = list(enc.numeric) + [
            f"{col}={v}" for col, vocab in enc.vocab_.items() for v in vocab
        ]
        enc.n_features_out_ = len(enc.feature_names_out_)
        return enc


def preprocess_clinical(records, fit_cohort):
    """Fit the encoder on ``fit_cohort`` and encode ``records`` with it."""
    enc = ClinicalEncoder().fit(fit_cohort)
    return enc, enc.transform(records)
