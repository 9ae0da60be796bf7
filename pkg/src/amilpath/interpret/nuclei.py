"""Nucleus segmentation and per-nucleus morphometry."""

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import ConvexHull, QhullError
from skimage.color import rgb2hed
from skimage.filters import threshold_otsu
from skimage.measure import approximate_polygon, find_contours
from skimage.morphology import h_maxima, remove_small_objects
from skimage.segmentation import watershed

FEATURES = (
    "major_axis",
    "minor_axis",
    "area",
    "orientation",
    "circumference",
    "density",
    "circularity",
    "rectangularity",
)
MIN_AREA = 40
REFERENCE_PATCH_AREA = 256 * 256
CONTOUR_UPSAMPLE = 4
CONTOUR_TOLERANCE = 1.25  # px at native resolution
ISOTROPY_RATIO = 0.95


class ClassicalNucleusSegmenter:
    """Hematoxylin channel -> Otsu threshold -> hole filling -> distance-transform watershed.

    ``min_hematoxylin`` is an absolute floor on the threshold so that a patch
    without nuclei is not split by Otsu into stain noise.
    """

    def __init__(self, min_area=MIN_AREA, min_hematoxylin=0.05, h=1.5):
        self.min_area = min_area
        self.min_hematoxylin = min_hematoxylin
        self.h = h

    def label(self, rgb):
        rgb = np.asarray(rgb)
        if rgb.ndim != 3 or rgb.shape[-1] != 3:
            raise ValueError(f"expected an H x W x 3 RGB patch, got {rgb.shape}")
        hema = rgb2hed(rgb)[..., 0]
        if np.ptp(hema) < 1e-6:
            return np.zeros(hema.shape, dtype=np.int32)
        thr = max(threshold_otsu(hema), self.min_hematoxylin)
        mask = ndi.binary_fill_holes(hema > thr)
        mask = remove_small_objects(mask, min_size=self.min_area)
        if not mask.any():
            return np.zeros(hema.shape, dtype=np.int32)
        dist = ndi.distance_transform_edt(mask)
        markers, _ = ndi.label(h_maxima(dist, self.h))
        labels = watershed(-dist, markers, mask=mask)
        # drop fragments the watershed cut below the size floor
        sizes = np.bincount(labels.ravel())
        small = np.flatnonzero(sizes < self.min_area)
        labels[np.isin(labels, small[small > 0])] = 0
        return labels

    def __call__(self, rgb):
        labels = self.label(rgb)
        return [labels == i for i in np.unique(labels) if i != 0]


def segment_nuclei(patch, segmenter=None):
    """List of boolean masks, one per nucleus."""
    return (segmenter or ClassicalNucleusSegmenter())(patch)


@dataclass
class NucleusRecord:
    major_axis: float
    minor_axis: float
    area: float
    orientation: float  # degrees in [-90, 90), x right / y up
    circumference: float
    circularity: float
    rectangularity: float
    density: float = float("nan")
    flags: list = field(default_factory=list)

    def values(self):
        return [getattr(self, f) for f in FEATURES]


def _crop(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def moment_axes(mask):
    """Full axis lengths (4 sqrt(eigenvalue)) and major-axis angle of the second-moment ellipse."""
    rows, cols = np.nonzero(mask)
    x = cols - cols.mean()
    y = -(rows - rows.mean())
    mu20, mu02, mu11 = np.mean(x * x), np.mean(y * y), np.mean(x * y)
    common = math.sqrt(((mu20 - mu02) / 2) ** 2 + mu11**2)
    lam1 = (mu20 + mu02) / 2 + common
    lam2 = (mu20 + mu02) / 2 - common
    theta = 0.5 * math.degrees(math.atan2(2 * mu11, mu20 - mu02))
    return 4 * math.sqrt(max(lam1, 0.0)), 4 * math.sqrt(max(lam2, 0.0)), axial(theta)


def axial(theta_deg):
    """Map an axis angle into [-90, 90)."""
    return (theta_deg + 90.0) % 180.0 - 90.0


def contour_length(mask):
    """Perimeter of the pixel-edge boundary with its staircases simplified away.

    The mask is upsampled (nearest) so the 0.5 iso-contour hugs pixel edges,
    then a Douglas-Peucker pass straightens steps of up to one pixel.
    """
    k = CONTOUR_UPSAMPLE
    up = np.kron(np.pad(mask, 1).astype(float), np.ones((k, k)))
    outer = max(find_contours(up, 0.5), key=len)
    poly = approximate_polygon(outer, CONTOUR_TOLERANCE * k)
    return float(np.sum(np.hypot(*np.diff(poly, axis=0).T))) / k


def min_rect_area(mask):
    """Area of the smallest rotated rectangle around all pixel squares of the mask."""
    rows, cols = np.nonzero(mask)
    corners = np.concatenate([
        np.c_[cols + dx, rows + dy] for dx in (0, 1) for dy in (0, 1)
    ]).astype(float)
    try:
        hull = corners[ConvexHull(corners).vertices]
    except QhullError:
        return float(mask.sum())
    best = math.inf
    for i in range(len(hull)):
        edge = hull[(i + 1) % len(hull)] - hull[i]
        norm = math.hypot(*edge)
        if norm == 0:
            continue
        u = edge / norm
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        best = min(best, (pu.max() - pu.min()) * (pv.max() - pv.min()))
    return float(best)


def nucleus_morphometry(mask, min_area=MIN_AREA):
    """Shape descriptors of one nucleus mask (density is filled in per patch)."""
    mask = np.asarray(mask, dtype=bool)
    area = float(mask.sum())
    if area < min_area:
        raise ValueError(f"mask area {area:.0f} px below the {min_area} px floor")
    mask = _crop(mask)
    major, minor, theta = moment_axes(mask)
    flags = []
    if minor < 1.0:
        minor = 1.0
        flags.append("minor_axis_floored")
    if minor / major > ISOTROPY_RATIO:
        flags.append("orientation_undefined")
    perim = contour_length(mask)
    return NucleusRecord(
        major_axis=major,
        minor_axis=minor,
        area=area,
        orientation=theta,
        circumference=perim,
        circularity=4 * math.pi * area / perim**2,
        rectangularity=area / min_rect_area(mask),
        flags=flags,
    )


def patch_morphometry(patch, segmenter=None, min_area=MIN_AREA):
    """Records for every nucleus in one patch; density = count per 256 x 256 px."""
    patch = np.asarray(patch)
    masks = segment_nuclei(patch, segmenter)
    records = [nucleus_morphometry(m, min_area) for m in masks if m.sum() >= min_area]
    density = len(records) * REFERENCE_PATCH_AREA / (patch.shape[0] * patch.shape[1])
    for r in records:
        r.density = density
    return records, density


def write_nucleus_csv(path, rows):
    """``rows``: iterable of (slide_id, (x, y), NucleusRecord)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "patch_x", "patch_y", *FEATURES])
        for sid, (x, y), rec in rows:
            w.writerow([sid, x, y, *(f"{v:.6g}" for v in rec.values())])


def record_dict(rec):
    return asdict(rec)
