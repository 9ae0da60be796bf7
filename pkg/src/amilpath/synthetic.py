"""Synthetic pseudo-slides with a planted, label-dependent nucleus signal.

Each slide is an RGB image with a pink stroma background and one rectangular
"tumor" region filled with dark, non-overlapping elliptical blobs. Positive
slides get a higher blob density (``density_gap``) and, optionally, more
elongated blobs (``elongation_gap``); the clinical age column shifts with
the label by ``age_gap`` years. All gaps at zero make the classes
statistically identical.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw

from .ingest import CATEGORICAL_VOCAB, write_annotation

STROMA_RGB = (236, 196, 214)
NUCLEUS_RGB = (72, 40, 118)

_CATEGORY_WEIGHTS = {
    "tumor_type": (957, 25, 76),
    "t_stage": (556, 502),
    "er": (831, 227),
    "pr": (790, 268),
    "her2": (277, 781),
    "molecular_subtype": (288, 372, 125, 273),
}


@dataclass
class SyntheticConfig:
    n_slides: int = 60
    seed: int = 0
    slide_size: int = 2048
    region_min: int = 1024
    region_max: int = 1280
    base_density: float = 14.0  # blobs per 256 x 256 px of tumor region
    density_jitter: float = 0.25  # per-slide multiplicative spread
    density_gap: float = 0.6  # positives: density x (1 + gap)
    nucleus_radius: float = 7.0
    elongation_gap: float = 0.5  # positives: axis ratio + gap
    age_gap: float = 8.0
    stain_jitter: float = 0.12
    positive_fraction: float = 0.5

    def __post_init__(self):
        if self.n_slides < 10:
            raise ValueError("n_slides must be >= 10")
        if not 256 <= self.region_min <= self.region_max <= self.slide_size - 160:
            raise ValueError(
                f"need 256 <= region_min <= region_max <= slide_size - 160, got "
                f"{self.region_min}, {self.region_max}, slide_size={self.slide_size}"
            )

    def null(self):
        """Same corpus settings with every label-dependent gap removed."""
        d = asdict(self)
        d.update(density_gap=0.0, elongation_gap=0.0, age_gap=0.0)
        return SyntheticConfig(**d)


def _place_blobs(rng, box, count, min_dist, max_tries=60):
    """Rejection-sample centres inside ``box`` at least ``min_dist`` apart."""
    x0, y0, x1, y1 = box
    cell = min_dist
    grid = {}
    pts = []
    for _ in range(count):
        for _ in range(max_tries):
            p = rng.uniform((x0, y0), (x1, y1))
            gx, gy = int(p[0] // cell), int(p[1] // cell)
            clash = False
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for q in grid.get((gx + dx, gy + dy), ()):
                        if (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 < min_dist**2:
                            clash = True
                            break
            if not clash:
                grid.setdefault((gx, gy), []).append(p)
                pts.append(p)
                break
    return np.array(pts).reshape(-1, 2)


def ellipse_polygon(cx, cy, a, b, theta_deg, n=32):
    """Vertices of an ellipse with semi-axes a >= b, major axis at theta (image x-right, y-up)."""
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    th = math.radians(theta_deg)
    x = a * np.cos(t) * math.cos(th) - b * np.sin(t) * math.sin(th)
    y = a * np.cos(t) * math.sin(th) + b * np.sin(t) * math.cos(th)
    # image rows grow downward, so a counter-clockwise angle flips y
    return list(zip(cx + x, cy - y))


def render_slide(rng, cfg, label):
    size = cfg.slide_size
    w = int(rng.integers(cfg.region_min, cfg.region_max + 1))
    h = int(rng.integers(cfg.region_min, cfg.region_max + 1))
    x0 = int(rng.integers(64, size - w - 64))
    y0 = int(rng.integers(64, size - h - 64))
    box = (x0, y0, x0 + w, y0 + h)

    positive = label > 0
    density = cfg.base_density * rng.uniform(1 - cfg.density_jitter, 1 + cfg.density_jitter)
    if positive:
        density *= 1 + cfg.density_gap
    ratio_lo = 1.0 + (cfg.elongation_gap if positive else 0.0)
    r = cfg.nucleus_radius
    expected = density * w * h / 256.0**2
    count = int(rng.poisson(expected))
    max_axis = r * math.sqrt(ratio_lo + 0.3)
    centres = _place_blobs(rng, (x0 + max_axis + 1, y0 + max_axis + 1,
                                 x0 + w - max_axis - 1, y0 + h - max_axis - 1),
                           count, 2 * max_axis + 3)

    stain = rng.uniform(1 - cfg.stain_jitter, 1 + cfg.stain_jitter)
    nucleus = tuple(int(np.clip(c * stain, 0, 255)) for c in NUCLEUS_RGB)
    img = Image.new("RGB", (size, size), STROMA_RGB)
    draw = ImageDraw.Draw(img)
    draw.rectangle(box, fill=tuple(int(c * 0.97) for c in STROMA_RGB))
    blobs = []
    for cx, cy in centres:
        ratio = rng.uniform(ratio_lo, ratio_lo + 0.3)
        a, b = r * math.sqrt(ratio), r / math.sqrt(ratio)
        theta = rng.uniform(-90, 90)
        draw.polygon(ellipse_polygon(cx, cy, a, b, theta), fill=nucleus)
        blobs.append((float(cx), float(cy), float(a), float(b), float(theta)))
    arr = np.asarray(img).astype(np.int16)
    noise = rng.normal(0, 4, size=(h, w, 3)).astype(np.int16)
    arr[y0 : y0 + h, x0 : x0 + w] += noise
    img = Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8))
    truth = dict(region=box, density=density, blob_count=len(blobs), stain=stain,
                 axis_ratio_range=(ratio_lo, ratio_lo + 0.3))
    return img, box, blobs, truth


def sample_clinical(rng, label, cfg):
    age = rng.normal(58.0 - (cfg.age_gap if label > 0 else 0.0), 10.0)
    row = {
        "age": float(np.clip(round(age, 1), 22, 90)),
        "tumor_size": float(np.clip(round(rng.normal(2.2, 0.8), 2), 0.5, 4.5)),
    }
    for col, vocab in CATEGORICAL_VOCAB.items():
        p = np.asarray(_CATEGORY_WEIGHTS[col], float)
        row[col] = vocab[int(rng.choice(len(vocab), p=p / p.sum()))]
    return row


def generate_synthetic_corpus(out_dir, n_slides=60, seed=0, config=None, **overrides):
    """Write a corpus under ``out_dir`` and return the paths it created.

    Layout: ``images/<id>.png``, ``annotations/<id>.json``, ``manifest.csv``,
    ``clinical.csv`` and ``truth.json`` (generation parameters per slide plus
    every blob as (cx, cy, a, b, theta)).
    """
    cfg = config or SyntheticConfig(n_slides=n_slides, seed=seed, **overrides)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    n_pos = int(round(cfg.n_slides * cfg.positive_fraction))
    labels = np.array([1] * n_pos + [0] * (cfg.n_slides - n_pos))
    rng.shuffle(labels)
    manifest, clinical, truth = [], [], {"config": asdict(cfg), "slides": {}}
    for i, lab in enumerate(labels):
        sid = f"syn{cfg.seed:03d}_{i:04d}"
        slide_rng = np.random.default_rng([cfg.seed, i])
        img, box, blobs, info = render_slide(slide_rng, cfg, lab)
        img.save(out / "images" / f"{sid}.png", compress_level=1)
        x0, y0, x1, y1 = box
        write_annotation(out / "annotations" / f"{sid}.json", sid, [[(x0, y0), (x1, y0), (x1, y1), (x0, y1)]])
        name = "N0" if lab == 0 else ("N+(1-2)" if slide_rng.random() < 0.52 else "N+(>=3)")
        manifest.append({"slide_id": sid, "image_uri": f"images/{sid}.png", "label": name})
        clinical.append({"slide_id": sid, **sample_clinical(slide_rng, lab, cfg)})
        truth["slides"][sid] = {"label": int(lab), **info, "blobs": blobs}
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["slide_id", "image_uri", "label"])
        w.writeheader()
        w.writerows(manifest)
    pd.DataFrame(clinical).to_csv(out / "clinical.csv", index=False)
    with open(out / "truth.json", "w") as fh:
        json.dump(truth, fh)
    return {
        "manifest": out / "manifest.csv",
        "annotations": out / "annotations",
        "clinical": out / "clinical.csv",
        "truth": out / "truth.json",
        "images": out / "images",
    }
