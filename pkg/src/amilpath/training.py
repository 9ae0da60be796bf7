"""Optimization loop, cosine-annealing warm-restart schedule and checkpoints."""

import copy
import csv
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .stats_eval import roc_auc

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    weight_decay: float = 1e-3
    t0: int = 10
    t_mult: int = 2
    lr_min: float = 0.0
    epochs: int = 30
    batch_bags: int = 8
    seed: int = 0
    class_weights: bool = False
    standardize: bool = False  # scale instance features to zero mean / unit variance on the training bags

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.t0 < 1:
            raise ValueError("t0 must be >= 1")
        if self.t_mult < 1:
            raise ValueError("t_mult must be >= 1")


def lr_at(t_cur, t_i, lr_min, lr_max):
    """eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / t_i)) / 2."""
    if t_i <= 0:
        raise ValueError("cycle length must be positive")
    if not 0 <= t_cur <= t_i:
        raise ValueError(f"t_cur={t_cur} outside [0, {t_i}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t_cur / t_i))


def cycle_position(epoch, t0, t_mult):
    """(t_cur, t_i) for a 0-based epoch under warm restarts."""
    t_i, t_cur = t0, epoch
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= t_mult
    return t_cur, t_i


def lr_schedule(n_epochs, t0, t_mult, lr_min, lr_max):
    return [lr_at(*cycle_position(e, t0, t_mult), lr_min, lr_max) for e in range(n_epochs)]


@dataclass
class BagData:
    """One bag ready for the network.

    ``instances`` is either N x H x W x 3 images (uint8 or float in [0, 1])
    or an N x D matrix of pre-computed instance features.
    """

    instances: np.ndarray
    clinical: np.ndarray | None = None
    label: int | None = None
    slide_id: str | None = None
    bag_id: str | None = None


@dataclass
class History:
    rows: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_auc: float | None = None

    def append(self, **row):
        self.rows.append(row)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_auc", "lr"])
            w.writeheader()
            w.writerows(self.rows)

    @property
    def losses(self):
        return [r["train_loss"] for r in self.rows]


def _is_image_bag(bag):
    return np.asarray(bag.instances).ndim == 4


def bag_tensor(bag, network, normalize):
    """Instances of one bag as a 1 x N x ... tensor in the network's dtype."""
    dtype = network.classifier.weight.dtype
    if _is_image_bag(bag):
        return normalize(bag.instances).to(dtype).unsqueeze(0)
    return torch.as_tensor(np.asarray(bag.instances), dtype=dtype).unsqueeze(0)


def clinical_tensor(bags, network):
    if network.clinical_dim == 0:
        return None
    dtype = network.classifier.weight.dtype
    vecs = []
    for b in bags:
        if b.clinical is None:
            raise ValueError(f"bag {b.bag_id} lacks the clinical vector the model expects")
        vecs.append(np.asarray(b.clinical, dtype=float))
    return torch.as_tensor(np.stack(vecs), dtype=dtype)


class FeatureCache:
    """Instance features per bag; images go through the embedder once when it is frozen."""

    def __init__(self, network, normalize, frozen):
        self.network = network
        self.normalize = normalize
        self.frozen = frozen
        self._cache = {}

    def features(self, bag, grad):
        if not _is_image_bag(bag):
            return bag_tensor(bag, self.network, self.normalize)
        if self.frozen:
            key = id(bag)
            if key not in self._cache:
                x = bag_tensor(bag, self.network, self.normalize)
                with torch.no_grad():
                    self._cache[key] = (bag, self.network.embed(x))
            return self._cache[key][1]
        x = bag_tensor(bag, self.network, self.normalize)
        with torch.set_grad_enabled(grad):
            return self.network.embed(x)


def forward_bags(network, bags, cache, grad=False):
    """Logits (B x K) and attention weights (list of N-vectors) for a list of bags."""
    feats = [cache.features(b, grad) for b in bags]
    clinical = clinical_tensor(bags, network)
    with torch.set_grad_enabled(grad):
        if len({f.shape[1] for f in feats}) == 1:
            logits, w = network.forward_features(torch.cat(feats), clinical)
            return logits, list(w)
        logits, weights = [], []
        for i, f in enumerate(feats):
            c = None if clinical is None else clinical[i : i + 1]
            lg, w = network.forward_features(f, c)
            logits.append(lg)
            weights.append(w[0])
        return torch.cat(logits), weights


def slide_level_auc(network, bags, cache, positive_from=1):
    """AUC of the slide-mean probability of any positive class."""
    scores, labels = {}, {}
    network.eval()
    with torch.no_grad():
        for i in range(0, len(bags), 64):
            chunk = bags[i : i + 64]
            logits, _ = forward_bags(network, chunk, cache)
            probs = torch.softmax(logits, -1).cpu().numpy()
            for b, p in zip(chunk, probs):
                scores.setdefault(b.slide_id, []).append(p[positive_from:].sum())
                labels[b.slide_id] = int(b.label >= positive_from)
    ids = sorted(scores)
    return roc_auc([np.mean(scores[s]) for s in ids], [labels[s] for s in ids])


def fit_feature_scaling(network, bags, cache):
    """Per-dimension mean and std of the training instances, frozen into the network."""
    with torch.no_grad():
        feats = torch.cat([cache.features(b, grad=False).reshape(-1, network.feature_dim) for b in bags])
    mean = feats.mean(dim=0)
    std = feats.std(dim=0, unbiased=False)
    std = torch.where(std > 1e-6, std, torch.ones_like(std))
    network.set_feature_scaling(mean, std)
    return mean, std


def _class_weight_tensor(labels, n_classes, dtype):
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    w = np.where(counts > 0, len(labels) / (n_classes * np.maximum(counts, 1)), 0.0)
    return torch.as_tensor(w, dtype=dtype)


def train(bags_train, bags_val, network, config, normalize=None, freeze_embedder=None):
    """Fit ``network`` in place and return ``(best_state_dict, history)``.

    The best state is the one with the highest slide-level validation AUC
    (earliest epoch on ties); without validation bags it is the final state.
    """
    from .mil_core import images_to_tensor

    normalize = normalize or images_to_tensor
    if freeze_embedder is None:
        freeze_embedder = network.embedder is None or not network.embedder.trainable
    if bags_val:
        val_labels = {(b.label > 0) for b in bags_val}
        if len(val_labels) < 2:
            raise ValueError("validation cohort has a single class; AUC is undefined")
    if not bags_train and config.epochs > 0:
        raise ValueError("no training bags")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    dtype = network.classifier.weight.dtype
    params = [p for n, p in network.named_parameters()
              if not (freeze_embedder and n.startswith("embedder."))]
    optimizer = torch.optim.Adam(params, lr=config.lr_max, weight_decay=config.weight_decay)
    cache = FeatureCache(network, normalize, freeze_embedder)
    if config.standardize and bags_train:
        fit_feature_scaling(network, bags_train, cache)
    labels_all = np.array([b.label for b in bags_train], dtype=int)
    weight = (_class_weight_tensor(labels_all, network.n_classes, dtype)
              if config.class_weights else None)

    history = History()
    best_state = copy.deepcopy(network.state_dict())
    best_auc = -np.inf
    for epoch in range(config.epochs):
        lr = lr_at(*cycle_position(epoch, config.t0, config.t_mult), config.lr_min, config.lr_max)
        for group in optimizer.param_groups:
            group["lr"] = lr
        network.train()
        if freeze_embedder and network.embedder is not None:
            network.embedder.eval()
        order = rng.permutation(len(bags_train))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_bags):
            batch = [bags_train[i] for i in order[start : start + config.batch_bags]]
            target = torch.as_tensor([b.label for b in batch], dtype=torch.long)
            logits, _ = forward_bags(network, batch, cache, grad=True)
            loss = F.cross_entropy(logits, target, weight=weight)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        val_auc = slide_level_auc(network, bags_val, cache) if bags_val else float("nan")
        history.append(epoch=epoch, train_loss=total / max(count, 1), val_auc=val_auc, lr=lr)
        log.info("epoch %d loss %.4f val_auc %.4f lr %.2e", epoch, total / max(count, 1), val_auc, lr)
        if not bags_val or val_auc > best_auc:
            best_auc = val_auc
            best_state = copy.deepcopy(network.state_dict())
            history.best_epoch = epoch
            history.best_val_auc = None if not bags_val else float(val_auc)
    network.load_state_dict(best_state)
    return best_state, history


def save_checkpoint(path, network, extra=None):
    """Zip archive: ``params.pt`` (state dict) plus ``meta.json``."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "embedder": network.embedder.name,
        "pretrained": bool(network.embedder.pretrained),
        "toy_size": getattr(network.embedder.trunk, "size", None),
        "input_size": network.embedder.input_size,
        "D": network.feature_dim,
        "H": network.hidden_dim,
        "C": network.clinical_dim,
        "n_classes": network.n_classes,
        "clinical_repeat": network.clinical_repeat,
        "dtype": str(network.classifier.weight.dtype).replace("torch.", ""),
    }
    meta.update(extra or {})
    buf = io.BytesIO()
    torch.save(network.state_dict(), buf)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("params.pt", buf.getvalue())
        zf.writestr("meta.json", json.dumps(meta, indent=2))
    return meta


def load_checkpoint(path):
    """Rebuild the network from a checkpoint; returns ``(network, meta)``."""
    from .mil_core import InstanceEmbedder, MILNetwork

    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        state = torch.load(io.BytesIO(zf.read("params.pt")), weights_only=True)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    embedder = InstanceEmbedder(
        meta["embedder"], pretrained=False, input_size=meta.get("input_size") or 256,
        toy_size=meta.get("toy_size") or 8,
    )
    net = MILNetwork(embedder, meta["H"], meta["n_classes"], meta["C"], meta["clinical_repeat"])
    if meta.get("dtype") == "float64":
        net = net.double()
    net.load_state_dict(state)
    net.eval()
    return net, meta


def config_dict(config):
    return asdict(config)
