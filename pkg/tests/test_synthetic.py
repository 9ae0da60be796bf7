import json

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage as ndi

from amilpath.ingest import load_manifest, read_clinical_table
from amilpath.synthetic import SyntheticConfig, ellipse_polygon, generate_synthetic_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    paths = generate_synthetic_corpus(out, n_slides=10, seed=3, slide_size=1024, region_min=512, region_max=640)
    return paths


def test_cardinality(corpus):
    records = load_manifest(corpus["manifest"], corpus["annotations"], corpus["clinical"])
    assert len(records) == 10
    assert len(list(corpus["images"].glob("*.png"))) == 10
    labels = [r.label for r in records]
    assert labels.count("N0") == 5
    assert len(read_clinical_table(corpus["clinical"])) == 10


def test_blob_count_matches_components(corpus):
    truth = json.loads(corpus["truth"].read_text())
    for sid, info in list(truth["slides"].items())[:4]:
        img = np.asarray(Image.open(corpus["images"] / f"{sid}.png").convert("RGB")).astype(int)
        dark = img.sum(axis=-1) < 450
        _, n = ndi.label(dark)
        assert n == info["blob_count"]


def test_density_gap(corpus):
    truth = json.loads(corpus["truth"].read_text())
    by_label = {0: [], 1: []}
    for info in truth["slides"].values():
        x0, y0, x1, y1 = info["region"]
        by_label[info["label"]].append(info["blob_count"] / ((x1 - x0) * (y1 - y0)))
    assert np.mean(by_label[1]) > 1.3 * np.mean(by_label[0])


def test_deterministic(tmp_path):
    a = generate_synthetic_corpus(tmp_path / "a", n_slides=10, seed=1, slide_size=768, region_min=384, region_max=512)
    b = generate_synthetic_corpus(tmp_path / "b", n_slides=10, seed=1, slide_size=768, region_min=384, region_max=512)
    assert a["truth"].read_text() == b["truth"].read_text()
    assert a["clinical"].read_text() == b["clinical"].read_text()


def test_null_config():
    cfg = SyntheticConfig().null()
    assert cfg.density_gap == cfg.elongation_gap == cfg.age_gap == 0


def test_bad_geometry():
    with pytest.raises(ValueError, match="region"):
        SyntheticConfig(slide_size=1024)


def test_ellipse_polygon_orientation():
    pts = np.array(ellipse_polygon(0, 0, 10, 2, 90))
    # major axis vertical; image y grows downward
    assert np.ptp(pts[:, 1]) == pytest.approx(20, abs=1e-9)
    assert np.ptp(pts[:, 0]) <= 4 + 1e-9
