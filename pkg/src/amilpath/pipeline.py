"""End-to-end orchestration over a working directory.

Layout under ``workdir``::

    config.json               resolved configuration of the last run
    patches/<slide>/<x>_<y>.png
    patches/index.csv         slide_id, x, y, path
    cohorts.csv               slide_id, cohort
    clinical_encoder.json     scaler + vocabulary fitted on the training cohort
    bags/<cohort>.jsonl
    model.ckpt, history.csv
    predictions/<cohort>.csv
    eval/<cohort>.json, eval/<cohort>.txt, eval/<cohort>_roc.csv
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bagging, inference, ingest
from .estimator import AttentionMILClassifier
from .stats_eval import binary_metrics, render_table, roc_curve
from .training import BagData

log = logging.getLogger(__name__)

COHORTS = ("train", "val", "test")


@dataclass
class RunConfig:
    workdir: str
    manifest: str | None = None
    annotations: str | None = None
    clinical: str | None = None
    seed: int = 0
    patch_size: int = 256
    level: int = 0  # pyramid level of the patches; single-resolution images only
    test_size: float = 0.2
    val_size: float = 0.25
    stratify: bool = True
    n_classes: int = 2
    bag: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    aggregation: str = "mean"
    merge_logits: bool = False
    threshold: float = 0.5
    alpha: float = 0.05

    def bag_config(self):
        return bagging.BagConfig(**{"seed": self.seed, **self.bag})

    def estimator(self):
        params = {"seed": self.seed, "n_classes": self.n_classes, **self.model}
        return AttentionMILClassifier(**params)

    def to_dict(self):
        return asdict(self)

    def save(self, path=None):
        path = Path(path or Path(self.workdir) / "config.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return path


def _workdir(cfg, *parts):
    p = Path(cfg.workdir, *parts)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def load_records(cfg):
    if not cfg.manifest or not cfg.annotations:
        raise ValueError("manifest and annotations paths are required")
    return ingest.load_manifest(cfg.manifest, cfg.annotations, cfg.clinical)


def tile(cfg, records=None):
    """Tile and extract every slide; writes ``patches/index.csv``."""
    if cfg.level != 0:
        raise ValueError("only level 0 is supported for single-resolution slide images")
    records = records or load_records(cfg)
    out = _workdir(cfg, "patches", "index.csv")
    rows = []
    for rec in records:
        patches = ingest.tile_tumor_regions(rec, cfg.patch_size)
        for p in ingest.extract_patches(rec, patches, out.parent):
            rows.append((rec.slide_id, p.origin[0], p.origin[1], p.path))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "x", "y", "path"])
        w.writerows(rows)
    log.info("tiled %d slides into %d patches", len(records), len(rows))
    return out


def read_patch_index(cfg):
    index = {}
    with open(Path(cfg.workdir, "patches", "index.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            index.setdefault(row["slide_id"], []).append(row["path"])
    return index


def build_bags(cfg, records=None):
    """Split slides into cohorts and write the bags of each cohort."""
    records = records or load_records(cfg)
    index = read_patch_index(cfg)
    records = [r for r in records if index.get(r.slide_id)]
    labels = [ingest.label_code(r.label, cfg.n_classes) for r in records]
    train, val, test = bagging.split_cohorts(
        [r.slide_id for r in records], labels, cfg.test_size, cfg.val_size, cfg.seed, cfg.stratify
    )
    bagging.write_cohorts(_workdir(cfg, "cohorts.csv"), train, val, test)
    vectors = {}
    bag_cfg = cfg.bag_config()
    if bag_cfg.attach_clinical:
        by_id = {r.slide_id: r for r in records}
        encoder = ingest.ClinicalEncoder().fit([by_id[s].clinical for s in train])
        with open(_workdir(cfg, "clinical_encoder.json"), "w") as fh:
            json.dump(encoder.to_dict(), fh, indent=1)
        enc = encoder.transform([r.clinical for r in records])
        vectors = {r.slide_id: v for r, v in zip(records, enc)}
    label_of = dict(zip([r.slide_id for r in records], labels))
    paths = {}
    for name, ids in zip(COHORTS, (train, val, test)):
        bags = []
        for sid in ids:
            bags.extend(bagging.build_bags(sid, index[sid], bag_cfg, label_of[sid], vectors.get(sid)))
        paths[name] = _workdir(cfg, "bags", f"{name}.jsonl")
        bagging.write_bags(paths[name], bags)
        log.info("%s: %d slides, %d bags", name, len(ids), len(bags))
    return paths


class PatchCache:
    def __init__(self):
        self._images = {}

    def __call__(self, path):
        if path not in self._images:
            self._images[path] = ingest.load_patch(path)
        return self._images[path]


def to_bag_data(bags, cache=None):
    cache = cache or PatchCache()
    out = []
    for b in bags:
        imgs = np.stack([cache(p) for p in b.instance_refs])
        clin = None if b.clinical_vec is None else np.asarray(b.clinical_vec, dtype=float)
        out.append(BagData(imgs, clin, b.label, b.slide_id, b.bag_id))
    return out


def load_cohort(cfg, name, cache=None):
    return to_bag_data(bagging.read_bags(Path(cfg.workdir, "bags", f"{name}.jsonl")), cache)


def train(cfg):
    cache = PatchCache()
    tr, va = load_cohort(cfg, "train", cache), load_cohort(cfg, "val", cache)
    est = cfg.estimator()
    if tr and tr[0].clinical is not None:
        est.set_params(clinical_dim=len(tr[0].clinical))
    est.fit(tr, eval_set=(va, [b.label for b in va]) if va else None)
    est.save(_workdir(cfg, "model.ckpt"), {"run_config": cfg.to_dict()})
    est.history_.to_csv(_workdir(cfg, "history.csv"))
    log.info("best epoch %s, val AUC %s", est.history_.best_epoch, est.history_.best_val_auc)
    return est


def predict(cfg, cohort="test", model=None):
    est = AttentionMILClassifier.load(model or Path(cfg.workdir, "model.ckpt"))
    bags = load_cohort(cfg, cohort)
    preds = est.predict_slides(bags, cfg.aggregation, cfg.threshold, cfg.merge_logits)
    out = _workdir(cfg, "predictions", f"{cohort}.csv")
    inference.write_predictions(out, preds)
    return out, preds


def true_labels(cfg, cohort):
    labels = {}
    for b in bagging.read_bags(Path(cfg.workdir, "bags", f"{cohort}.jsonl")):
        labels[b.slide_id] = b.label
    return labels


def evaluate(cfg, cohort="test", predictions=None):
    """MetricsReport JSON, a text table and ROC points for one cohort."""
    df = inference.read_predictions(predictions or Path(cfg.workdir, "predictions", f"{cohort}.csv"))
    labels = true_labels(cfg, cohort)
    y = np.array([int(labels[s] > 0) for s in df["slide_id"]])
    score = 1.0 - df[inference.probability_columns(cfg.n_classes)[0]].to_numpy()
    pred = (score >= cfg.threshold).astype(int)
    report = binary_metrics(pred, y, score, alpha=cfg.alpha, cohort=cohort)
    base = _workdir(cfg, "eval", f"{cohort}.json")
    base.write_text(report.to_json())
    base.with_suffix(".txt").write_text(render_table([((cohort,), report)], extra_header=("Cohort",)))
    fpr, tpr, thr = roc_curve(score, y)
    with open(base.with_name(f"{cohort}_roc.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        w.writerows(zip(fpr, tpr, thr))
    return report
