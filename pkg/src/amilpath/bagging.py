"""Slide-level cohort splits and MIL bag construction."""

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class BagConfig:
    N: int = 10
    M: int | None = None  # None -> ceil(patches / N) clipped to [1, 100]
    seed: int = 0
    attach_clinical: bool = False
    max_bags: int = 100

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.M is not None and self.M < 1:
            raise ValueError("M must be >= 1")

    def bags_for(self, n_patches):
        if self.M is not None:
            return self.M
        return int(min(max(math.ceil(n_patches / self.N), 1), self.max_bags))


@dataclass
class Bag:
    bag_id: str
    slide_id: str
    instance_refs: list
    label: int | None
    clinical_vec: list | None = None
    instance_index: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def _resolve_count(size, n, name):
    if isinstance(size, (int, np.integer)) and not isinstance(size, bool):
        if not 0 <= size <= n:
            raise ValueError(f"{name}={size} outside [0, {n}]")
        return int(size)
    if not 0 <= size < 1:
        raise ValueError(f"{name} fraction must lie in [0, 1)")
    return int(math.floor(n * size + 1e-9))


def _allocate(class_counts, total):
    """Split ``total`` across classes proportionally (largest remainder)."""
    n = sum(class_counts)
    exact = [c * total / n for c in class_counts]
    base = [int(math.floor(e + 1e-9)) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def _take(ids, labels, size, rng, stratify):
    """Pick ``size`` ids (optionally per class); returns (picked, rest) keeping input order."""
    ids = list(ids)
    if not stratify:
        perm = rng.permutation(len(ids))
        chosen = set(perm[:size].tolist())
    else:
        classes = sorted(set(labels))
        members = [[i for i, lab in enumerate(labels) if lab == c] for c in classes]
        quota = _allocate([len(m) for m in members], size)
        chosen = set()
        for m, q in zip(members, quota):
            perm = rng.permutation(len(m))
            chosen.update(m[j] for j in perm[:q])
    picked = [ids[i] for i in range(len(ids)) if i in chosen]
    rest = [ids[i] for i in range(len(ids)) if i not in chosen]
    return picked, rest


def split_cohorts(slide_ids, labels, test_size=0.2, val_size=0.25, seed=0, stratify=True):
    """Slide-level train/val/test split.

    ``test_size`` and ``val_size`` follow the scikit-learn convention: a
    float is a fraction (count = floor(fraction * n)), an int an absolute
    count. ``val_size`` is taken from the pool left after removing the test
    cohort. With ``stratify`` the class proportions of each cohort match the
    input within one slide per class.

    Returns three lists of slide ids ``(train, val, test)``.
    """
    slide_ids = list(slide_ids)
    labels = list(labels)
    if len(slide_ids) != len(labels):
        raise ValueError("slide_ids and labels differ in length")
    if len(set(slide_ids)) != len(slide_ids):
        raise ValueError("slide ids must be unique")
    if len(slide_ids) < 5:
        raise ValueError("need at least 5 slides to split")
    if stratify:
        counts = {c: labels.count(c) for c in set(labels)}
        small = {c: k for c, k in counts.items() if k < 3}
        if small:
            raise ValueError(f"classes with < 3 slides cannot be stratified: {small}")
    rng = np.random.default_rng(seed)
    label_of = dict(zip(slide_ids, labels))
    n_test = _resolve_count(test_size, len(slide_ids), "test_size")
    test, pool = _take(slide_ids, labels, n_test, rng, stratify)
    n_val = _resolve_count(val_size, len(pool), "val_size")
    val, train = _take(pool, [label_of[s] for s in pool], n_val, rng, stratify)
    return train, val, test


def write_cohorts(path, train, val, test):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "cohort"])
        for name, ids in (("train", train), ("val", val), ("test", test)):
            for sid in ids:
                w.writerow([sid, name])


def read_cohorts(path):
    out = {"train": [], "val": [], "test": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["cohort"], []).append(row["slide_id"])
    return out


def slide_rng(seed, slide_id):
    """Generator seeded from (global seed, slide id); independent of processing order."""
    digest = hashlib.sha256(str(slide_id).encode()).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest[:8], "little")])


def build_bags(slide_id, patch_refs, config, label=None, clinical_vec=None):
    """Draw the bags of one slide.

    Instances are sampled uniformly without replacement when the slide has at
    least N patches, otherwise with replacement (with a warning). Returns an
    empty list, logging the reason, for a slide without patches.
    """
    patch_refs = list(patch_refs)
    if not patch_refs:
        log.warning("slide %s excluded: no patches", slide_id)
        return []
    n = len(patch_refs)
    replace = n < config.N
    if replace:
        warnings.warn(f"slide {slide_id}: {n} patches < N={config.N}; sampling with replacement")
    rng = slide_rng(config.seed, slide_id)
    vec = None
    if config.attach_clinical:
        if clinical_vec is None:
            raise ValueError(f"attach_clinical set but slide {slide_id} has no clinical vector")
        vec = [float(v) for v in np.asarray(clinical_vec, dtype=float)]
    bags = []
    for m in range(config.bags_for(n)):
        idx = rng.choice(n, size=config.N, replace=replace).tolist()
        bags.append(Bag(
            bag_id=f"{slide_id}#{m}",
            slide_id=slide_id,
            instance_refs=[patch_refs[i] for i in idx],
            label=label,
            clinical_vec=list(vec) if vec is not None else None,
            instance_index=idx,
        ))
    return bags


def write_bags(path, bags):
    with open(path, "w") as fh:
        for b in bags:
            fh.write(b.to_json() + "\n")


def read_bags(path):
    with open(path) as fh:
        return [Bag.from_json(line) for line in fh if line.strip()]


def check_no_leakage(cohorts):
    """Raise if any slide id appears in more than one cohort."""
    seen = {}
    for name, ids in cohorts.items():
        for sid in ids:
            if sid in seen and seen[sid] != name:
                raise ValueError(f"slide {sid} in both {seen[sid]} and {name}")
            seen[sid] = name
