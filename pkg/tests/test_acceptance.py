"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The verdict lines are printed in the ``acceptance criteria`` section of the
pytest terminal summary.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
import torch
from PIL import Image
from scipy import stats

from amilpath.bagging import split_cohorts
from amilpath.cli import main
from amilpath.estimator import AttentionMILClassifier
from amilpath.ingest import label_code, load_manifest, read_region, tile_tumor_regions
from amilpath.interpret import build_feature_bags, nucleus_morphometry, rank_feature_importance
from amilpath.interpret.feature_bags import measure_slide
from amilpath.mil_core import AttentionPooling, MILNetwork, InstanceEmbedder
from amilpath.stats_eval import (
    MetricsReport,
    Rate,
    clopper_pearson,
    delong_compare,
    mann_whitney_u,
    render_table,
    roc_auc,
)
from amilpath.synthetic import generate_synthetic_corpus
from amilpath.training import BagData, lr_schedule

# ---------------------------------------------------------------- helpers


def auc_by_enumeration(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > q else (0.5 if p == q else 0.0) for p in pos for q in neg)
    return total / (len(pos) * len(neg))


def bootstrap_p(a, b, y, n_boot, rng):
    """Two-sided normal p from the bootstrap SD of a paired AUC difference."""
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    ip = pos[rng.integers(0, len(pos), (n_boot, len(pos)))]
    ineg = neg[rng.integers(0, len(neg), (n_boot, len(neg)))]

    def aucs(s):
        P, N = s[ip][:, :, None], s[ineg][:, None, :]
        return (P > N).mean((1, 2)) + 0.5 * (P == N).mean((1, 2))

    diffs = aucs(a) - aucs(b)
    observed = auc_by_enumeration(a, y) - auc_by_enumeration(b, y)
    return float(2 * stats.norm.sf(abs(observed) / diffs.std(ddof=1)))


def mwu_enumerated(x, y):
    """U by pair counting and the two-sided p over every relabelling of the pooled sample."""
    pooled = np.r_[x, y]
    n, n1 = len(pooled), len(x)
    cmp = (pooled[:, None] > pooled[None, :]) + 0.5 * (pooled[:, None] == pooled[None, :])
    combos = np.array(list(itertools.combinations(range(n), n1)))
    member = np.zeros((len(combos), n))
    np.put_along_axis(member, combos, 1.0, axis=1)
    u_all = ((member @ cmp) * (1 - member)).sum(1)
    u_obs = float(cmp[:n1, n1:].sum())
    centre = n1 * len(y) / 2
    p = float(np.mean(np.abs(u_all - centre) >= abs(u_obs - centre) - 1e-9))
    return u_obs, p


def disk_mask(r, cx, cy, size=101):
    yy, xx = np.mgrid[:size, :size]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def ellipse_mask(a, b, theta_deg, size=101):
    """Pixel centres inside the ellipse; theta counter-clockwise with y up."""
    yy, xx = np.mgrid[:size, :size]
    dx, dy = xx - size // 2, -(yy - size // 2)
    t = math.radians(theta_deg)
    u = dx * math.cos(t) + dy * math.sin(t)
    v = -dx * math.sin(t) + dy * math.cos(t)
    return u**2 / a**2 + v**2 / b**2 <= 1


# ---------------------------------------------------------------- criteria


def test_c1_mil_invariants(criterion):
    t0 = time.time()
    rng = np.random.default_rng(0)

    def random_bag(i, n):
        imgs = rng.integers(0, 256, (n, 16, 16, 3), dtype=np.uint8)
        return BagData(imgs, rng.normal(size=3), i % 2, f"slide{i // 2}", f"b{i}")

    train = [random_bag(i, 4) for i in range(8)]
    est = AttentionMILClassifier(hidden_dim=32, clinical_dim=3, epochs=1, lr_max=1e-2, seed=0)
    est.fit(train, [b.label for b in train])

    bags = [random_bag(i, int(rng.integers(1, 65))) for i in range(200)]
    perms = [rng.permutation(len(b.instances)) for b in bags]
    shuffled = [BagData(b.instances[p], b.clinical, b.label, b.slide_id, b.bag_id) for b, p in zip(bags, perms)]

    att, att_p = est.attention(bags), est.attention(shuffled)
    sum_err = max(abs(float(w.sum()) - 1) for w in att)
    weight_err = max(float(np.abs(w[p] - wp).max()) for w, wp, p in zip(att, att_p, perms))
    bag_err = float(np.abs(est.predict_proba(bags) - est.predict_proba(shuffled)).max())
    slides, slides_p = est.predict_slides(bags), est.predict_slides(shuffled)
    slide_err = max(float(np.abs(a.class_probs - b.class_probs).max()) for a, b in zip(slides, slides_p))
    elapsed = time.time() - t0
    ok = sum_err <= 1e-6 and max(bag_err, slide_err) <= 1e-5 and elapsed < 60
    criterion(1, "MIL invariants", ok,
              f"sum err {sum_err:.1e}, bag {bag_err:.1e}, slide {slide_err:.1e}, {elapsed:.1f}s")
    assert ok and weight_err <= 1e-5


def test_c2_gradient_check(criterion):
    t0 = time.time()
    torch.manual_seed(0)
    net = MILNetwork(InstanceEmbedder("toy", toy_size=2), hidden_dim=5, n_classes=2, clinical_dim=2).double()
    h = torch.randn(2, 4, net.feature_dim, dtype=torch.float64)
    clin = torch.randn(2, 2, dtype=torch.float64)
    y = torch.tensor([0, 1])
    params = list(net.attention.parameters()) + list(net.classifier.parameters())

    def loss_fn():
        logits, _ = net.forward_features(h, clin)
        return torch.nn.functional.cross_entropy(logits, y)

    grads = torch.autograd.grad(loss_fn(), params)
    eps, worst = 1e-5, 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            num = torch.empty_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                num[i] = (up - down) / (2 * eps)
            # the score head's bias has zero gradient on both sides
            worst = max(worst, float((g.view(-1) - num).norm() / max(num.norm(), g.norm(), 1e-8)))
    elapsed = time.time() - t0
    ok = worst <= 1e-3 and elapsed < 10
    criterion(2, "gradient check", ok, f"max relative error {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_c3_statistics_oracles(criterion):
    t0 = time.time()
    rng = np.random.default_rng(3)
    details, ok = [], True

    # AUC equals pairwise concordance on 100 random 50-case sets (with ties)
    auc_exact = True
    for _ in range(100):
        y = np.r_[np.zeros(25), np.ones(25)].astype(int)
        rng.shuffle(y)
        s = np.round(rng.normal(size=50) + 0.7 * y, 1)
        auc_exact &= roc_auc(s, y) == auc_by_enumeration(s, y)
    ok &= auc_exact
    details.append(f"AUC exact {auc_exact}")

    # DeLong p against a 20,000-resample bootstrap on 20 paired sets
    worst = 0.0
    for _ in range(20):
        y = np.r_[np.zeros(30), np.ones(30)].astype(int)
        latent = rng.normal(size=60) + y
        a = latent + rng.uniform(0.3, 1.0) * rng.normal(size=60)
        b = latent + rng.uniform(0.3, 1.0) * rng.normal(size=60)
        worst = max(worst, abs(delong_compare(a, b, y).p_value - bootstrap_p(a, b, y, 20000, rng)))
    ok &= worst <= 0.02
    details.append(f"DeLong vs bootstrap max |dp| {worst:.3f}")

    # Mann-Whitney exact branch against enumeration, every n1, n2 <= 8
    mwu_ok = True
    for n1, n2 in itertools.product(range(1, 9), repeat=2):
        for x, z in ((rng.normal(size=n1), rng.normal(size=n2)),
                     (rng.integers(0, 4, n1).astype(float), rng.integers(0, 4, n2).astype(float))):
            res = mann_whitney_u(x, z)
            u, p = mwu_enumerated(x, z)
            mwu_ok &= res.method in ("exact", "all-tied") and res.statistic == u and abs(res.p_value - p) <= 1e-12
    ok &= mwu_ok
    details.append(f"MWU exact {mwu_ok}")

    # Clopper-Pearson coverage at n=30, p=0.3
    n, p = 30, 0.3
    bounds = np.array([clopper_pearson(k, n) for k in range(n + 1)])
    k = rng.binomial(n, p, 10000)
    coverage = float(np.mean((bounds[k, 0] <= p) & (p <= bounds[k, 1])))
    ok &= coverage >= 0.945
    details.append(f"CP coverage {coverage:.4f}")

    elapsed = time.time() - t0
    ok &= elapsed < 300
    criterion(3, "statistics oracles", ok, ", ".join(details) + f", {elapsed:.0f}s")
    assert ok


def test_c4_schedule(criterion):
    lr_min, lr_max = 1e-6, 1e-4
    expected = [lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / t_i))
                for t_i in (3, 6) for t in range(t_i)]
    got = lr_schedule(9, 3, 2, lr_min, lr_max)
    ok = got == expected
    criterion(4, "cosine warm restarts schedule", ok, "T0=3, Tmult=2, 9 epochs")
    assert ok


def run_synthetic_pipeline(work, seed, null):
    """``synth --n 60`` followed by the full CLI pipeline; returns the test MetricsReport."""
    w = ["--workdir", str(work), "--seed", str(seed), "--log-level", "WARNING"]
    synth = work / "synth"
    steps = [
        ["synth", "--n", "60", *(["--null"] if null else [])],
        ["tile", "--manifest", str(synth / "manifest.csv"), "--annotations", str(synth / "annotations")],
        ["build-bags", "--M", "10"],
        ["train", "--toy-size", "4", "--standardize", "--lr-max", "1e-4"],
        ["predict"],
        ["evaluate"],
    ]
    for step in steps:
        assert main([*step, *w]) == 0, step
    return MetricsReport.from_dict(json.loads((work / "eval" / "test.json").read_text()))


@pytest.mark.slow
def test_c5_synthetic_end_to_end(criterion, tmp_path):
    t0 = time.time()
    signal = run_synthetic_pipeline(tmp_path / "signal", 0, null=False).auc
    null = [run_synthetic_pipeline(tmp_path / f"null{s}", s, null=True).auc for s in range(5)]
    elapsed = time.time() - t0
    mean_null = float(np.mean(null))
    ok = signal >= 0.85 and 0.4 <= mean_null <= 0.6 and elapsed <= 1800
    criterion(5, "synthetic end-to-end", ok,
              f"signal AUC {signal:.3f}, null AUCs {np.round(null, 3).tolist()} mean {mean_null:.3f}, {elapsed:.0f}s")
    assert ok


def test_c6_morphometry(criterion):
    rng = np.random.default_rng(6)
    circ = [nucleus_morphometry(disk_mask(r, 50 + rng.uniform(-0.5, 0.5), 50 + rng.uniform(-0.5, 0.5))).circularity
            for r in (12, 16, 20, 25, 30)]
    square = np.zeros((60, 60), bool)
    square[10:40, 15:45] = True
    sq = nucleus_morphometry(square)
    orient_err = []
    for theta in (-80, -45, -10, 0, 30, 60, 85):
        o = nucleus_morphometry(ellipse_mask(30, 10, theta)).orientation
        orient_err.append(abs((o - theta + 90) % 180 - 90))
    ok = (all(0.95 <= c <= 1.02 for c in circ)
          and abs(sq.rectangularity - 1) <= 0.02
          and abs(sq.circularity - math.pi / 4) <= 0.03
          and max(orient_err) <= 2)
    criterion(6, "morphometry", ok,
              f"disk circularity {min(circ):.3f}..{max(circ):.3f}, square rect {sq.rectangularity:.3f} "
              f"circ {sq.circularity:.3f}, max orientation error {max(orient_err):.2f} deg")
    assert ok


def importance_on_corpus(out, seed, density_gap):
    paths = generate_synthetic_corpus(out, n_slides=40, seed=seed, slide_size=1024, region_min=512,
                                      region_max=768, elongation_gap=0.0, age_gap=0.0, density_gap=density_gap)
    slides = []
    for rec in load_manifest(paths["manifest"], paths["annotations"]):
        with Image.open(rec.image_uri) as im:
            patches = {p.origin: read_region(im, p.origin, 256) for p in tile_tumor_regions(rec)}
        slides.append(measure_slide(rec.slide_id, patches, label_code(rec.label))[0])
    bags, _ = build_feature_bags(slides)
    return rank_feature_importance(bags, seed=seed)


@pytest.mark.slow
def test_c7_feature_importance(criterion, tmp_path):
    planted = [importance_on_corpus(tmp_path / f"dens{s}", s, 0.6) for s in range(5)]
    null = [importance_on_corpus(tmp_path / f"null{s}", s, 0.0) for s in range(5)]
    top_hits = sum(r.top_feature == "density" for r in planted)
    null_clean = sum(bool(np.all(r.reported_p() > 0.05)) for r in null)
    ok = top_hits >= 4 and null_clean >= 4
    min_p = [round(float(r.reported_p().min()), 3) for r in null]
    criterion(7, "feature importance", ok,
              f"density top-1 in {top_hits}/5, null all p > 0.05 in {null_clean}/5 (min p {min_p})")
    assert ok


def test_c8_split_fixture(criterion):
    ids = [f"s{i:04d}" for i in range(1058)]
    labels = [0] * 655 + [1] * 403
    train, val, test = split_cohorts(ids, labels, test_size=218, val_size=0.25, seed=0)
    sizes = (len(train) + len(val), len(test), len(train), len(val))
    disjoint = len(set(train) | set(val) | set(test)) == 1058
    ok = sizes == (840, 218, 630, 210) and disjoint
    criterion(8, "split fixture", ok, "{}/{} then {}/{}".format(*sizes))
    assert ok


TABLE_FIXTURE = (
    "Methods   Cohort  AUC                   ACC (%)               SENS (%)              SPEC (%)"
    "              PPV (%)               NPV (%)\n"
    "DL-CNB+C  I-T     0.831 [0.775, 0.878]  75.69 [69.44, 81.23]  89.29 [80.63, 94.98]  67.16 [58.53, 75.03]"
    "  63.03 [56.96, 68.71]  90.91 [84.21, 94.94]\n"
)


def test_c9_report_layout(criterion):
    def rate(v, lo, hi, k, n):
        return Rate(v / 100, lo / 100, hi / 100, k, n)

    report = MetricsReport(
        cohort="I-T", n=218, auc=0.831, auc_ci=(0.775, 0.878),
        acc=rate(75.69, 69.44, 81.23, 165, 218), sens=rate(89.29, 80.63, 94.98, 75, 84),
        spec=rate(67.16, 58.53, 75.03, 90, 134), ppv=rate(63.03, 56.96, 68.71, 75, 119),
        npv=rate(90.91, 84.21, 94.94, 90, 99),
    )
    back = MetricsReport.from_dict(json.loads(report.to_json()))
    text = render_table([(("DL-CNB+C", "I-T"), back)], extra_header=("Methods", "Cohort"))
    ok = text == TABLE_FIXTURE
    criterion(9, "report layout", ok, "byte-for-byte" if ok else repr(text))
    assert ok
