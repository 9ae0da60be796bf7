"""Per-patch attention heat maps and slide overlays."""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from matplotlib import colormaps
from PIL import Image


def patch_origin(ref):
    """``.../<x>_<y>.png`` or ``"<x>_<y>"`` -> (x, y)."""
    stem = os.path.splitext(os.path.basename(str(ref)))[0]
    x, y = stem.split("_")
    return int(x), int(y)


@dataclass
class HeatmapLayer:
    slide_id: str
    origins: list  # tiled patch origins, row-major
    weights: np.ndarray  # normalized to [0, 1], NaN where never sampled
    raw: np.ndarray  # per-patch mean attention before normalization
    patch_size: int = 256
    flags: list = field(default_factory=list)

    @property
    def coverage(self):
        """Fraction of tiled patches that appeared in at least one bag."""
        if not len(self.weights):
            return 0.0
        return float(np.mean(~np.isnan(self.weights)))

    @property
    def entries(self):
        return list(zip(self.origins, self.weights.tolist()))

    def to_dict(self):
        return {
            "slide_id": self.slide_id,
            "patch_size": self.patch_size,
            "coverage": self.coverage,
            "flags": self.flags,
            "entries": [
                {"x": int(x), "y": int(y),
                 "weight": None if np.isnan(w) else float(w),
                 "raw": None if np.isnan(r) else float(r)}
                for (x, y), w, r in zip(self.origins, self.weights, self.raw)
            ],
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def heatmap_export(slide_id, bags, weights, tiled=None, patch_size=256, origin_of=patch_origin):
    """Average each patch's attention over every bag that drew it.

    ``bags`` carry ``instance_refs``; ``weights[i]`` is the softmax output of
    bag i. ``tiled`` lists every patch of the slide (defaults to the sampled
    ones). Weights are min-max scaled per slide; a constant field maps to 0.5.
    """
    if not bags:
        raise ValueError(f"slide {slide_id}: no scored bags")
    sums, counts = {}, {}
    for bag, w in zip(bags, weights, strict=True):
        w = np.asarray(w, dtype=float)
        if len(w) != len(bag.instance_refs):
            raise ValueError(f"bag {bag.bag_id}: {len(w)} weights for {len(bag.instance_refs)} instances")
        if abs(w.sum() - 1) > 1e-5:
            raise ValueError(f"bag {bag.bag_id}: attention weights sum to {w.sum():.6f}")
        for ref, wk in zip(bag.instance_refs, w):
            o = origin_of(ref)
            sums[o] = sums.get(o, 0.0) + wk
            counts[o] = counts.get(o, 0) + 1
    origins = [origin_of(r) for r in tiled] if tiled is not None else sorted(sums, key=lambda o: (o[1], o[0]))
    extra = set(sums) - set(origins)
    if extra:
        raise ValueError(f"slide {slide_id}: sampled patches outside the tiling: {sorted(extra)[:3]}")
    raw = np.array([sums[o] / counts[o] if o in sums else np.nan for o in origins])
    flags = []
    lo, hi = np.nanmin(raw), np.nanmax(raw)
    if hi - lo <= 1e-12:
        norm = np.where(np.isnan(raw), np.nan, 0.5)
        flags.append("constant_attention")
    else:
        norm = (raw - lo) / (hi - lo)
    if np.isnan(raw).any():
        flags.append("unsampled_patches")
    return HeatmapLayer(slide_id, origins, norm, raw, patch_size, flags)


def render_overlay(slide_image, layer, downsample=16, alpha=0.5, cmap="jet"):
    """Alpha-blend the colorized weights over a down-sampled slide; unsampled patches stay clear."""
    img = slide_image if isinstance(slide_image, Image.Image) else Image.open(slide_image)
    img = img.convert("RGB")
    w, h = img.size
    size = (max(1, w // downsample), max(1, h // downsample))
    base = np.asarray(img.resize(size, Image.BILINEAR), dtype=float) / 255.0
    heat = np.zeros(base.shape[:2] + (4,))
    colors = colormaps[cmap]
    step = layer.patch_size / downsample
    for (x, y), v in zip(layer.origins, layer.weights):
        if np.isnan(v):
            continue
        c0, r0 = int(round(x / downsample)), int(round(y / downsample))
        c1, r1 = int(round(x / downsample + step)), int(round(y / downsample + step))
        heat[r0:r1, c0:c1, :3] = colors(float(v))[:3]
        heat[r0:r1, c0:c1, 3] = alpha
    a = heat[..., 3:4]
    out = base * (1 - a) + heat[..., :3] * a
    return Image.fromarray(np.clip(out * 255 + 0.5, 0, 255).astype(np.uint8))
