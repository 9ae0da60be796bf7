"""scikit-learn style wrapper around the attention MIL network."""

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import inference
from ._validation import check_instances
from .mil_core import CLINICAL_REPEAT, InstanceEmbedder, MILNetwork, images_to_tensor
from .training import BagData, FeatureCache, TrainConfig, forward_bags, load_checkpoint, save_checkpoint, train


def as_bags(X, y=None):
    """Coerce ``X`` (BagData items or bare instance arrays) to a list of BagData."""
    bags = []
    for i, item in enumerate(X):
        if not isinstance(item, BagData):
            item = BagData(instances=item)
        check_instances(item.instances, name=f"bag {i}")
        if y is not None:
            item = BagData(item.instances, item.clinical, int(y[i]), item.slide_id, item.bag_id)
        if item.slide_id is None:
            item = BagData(item.instances, item.clinical, item.label, f"bag{i}", item.bag_id or f"bag{i}")
        bags.append(item)
    return bags


class AttentionMILClassifier(ClassifierMixin, BaseEstimator):
    """Attention-pooled multiple-instance classifier with optional clinical fusion.

    Each sample is a bag (``BagData``) of N instances. Instances are embedded
    by a CNN trunk (spatially max-pooled), weighted by a two-layer attention
    network and summed; the pooled vector, concatenated with the clinical
    vector repeated ``clinical_repeat`` times when ``clinical_dim > 0``,
    feeds a linear classifier.

    Parameters mirror :class:`TrainConfig` plus the architecture:
    ``embedder``, ``pretrained``, ``finetune_backbone``, ``toy_size`` (grid of
    the parameter-free ``"toy"`` embedder), ``hidden_dim``,
    ``n_classes``, ``clinical_dim`` and ``clinical_repeat``.
    """

    def __init__(
        self,
        embedder="toy",
        pretrained=False,
        finetune_backbone=True,
        toy_size=8,
        hidden_dim=128,
        n_classes=2,
        clinical_dim=0,
        clinical_repeat=CLINICAL_REPEAT,
        lr_max=1e-4,
        weight_decay=1e-3,
        t0=10,
        t_mult=2,
        lr_min=0.0,
        epochs=30,
        batch_bags=8,
        class_weights=False,
        standardize=False,
        seed=0,
        dtype="float32",
    ):
        self.embedder = embedder
        self.pretrained = pretrained
        self.finetune_backbone = finetune_backbone
        self.toy_size = toy_size
        self.hidden_dim = hidden_dim
        self.n_classes = n_classes
        self.clinical_dim = clinical_dim
        self.clinical_repeat = clinical_repeat
        self.lr_max = lr_max
        self.weight_decay = weight_decay
        self.t0 = t0
        self.t_mult = t_mult
        self.lr_min = lr_min
        self.epochs = epochs
        self.batch_bags = batch_bags
        self.class_weights = class_weights
        self.standardize = standardize
        self.seed = seed
        self.dtype = dtype

    def train_config(self):
        return TrainConfig(
            lr_max=self.lr_max, weight_decay=self.weight_decay, t0=self.t0, t_mult=self.t_mult,
            lr_min=self.lr_min, epochs=self.epochs, batch_bags=self.batch_bags, seed=self.seed,
            class_weights=self.class_weights, standardize=self.standardize,
        )

    def build_network(self):
        torch.manual_seed(self.seed)
        emb = InstanceEmbedder(self.embedder, pretrained=self.pretrained, toy_size=self.toy_size)
        net = MILNetwork(emb, self.hidden_dim, self.n_classes, self.clinical_dim, self.clinical_repeat)
        return net.double() if self.dtype == "float64" else net

    def fit(self, X, y=None, eval_set=None):
        """Train on bags ``X``; ``eval_set=(X_val, y_val)`` drives model selection."""
        bags = as_bags(X, y)
        val = as_bags(*eval_set) if eval_set is not None else None
        self.classes_ = np.arange(self.n_classes)
        self.network_ = self.build_network()
        frozen = not self.finetune_backbone or not self.network_.embedder.trainable
        self._frozen = frozen
        _, self.history_ = train(bags, val, self.network_, self.train_config(), freeze_embedder=frozen)
        return self

    def _forward(self, X):
        check_is_fitted(self, "network_")
        bags = as_bags(X)
        cache = FeatureCache(self.network_, images_to_tensor, True)
        self.network_.eval()
        logits, weights = [], []
        with torch.no_grad():
            for i in range(0, len(bags), 64):
                lg, w = forward_bags(self.network_, bags[i : i + 64], cache)
                logits.append(lg)
                weights.extend(x.numpy() for x in w)
        return torch.cat(logits).numpy(), weights

    def decision_function(self, X):
        return self._forward(X)[0]

    def predict_proba(self, X):
        logits = self.decision_function(X)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def attention(self, X):
        """Softmax attention weights, one N-vector per bag."""
        return self._forward(X)[1]

    def predict_slides(self, X, aggregation="mean", threshold=0.5, merge_logits=False):
        bags = as_bags(X)
        logits, _ = self._forward(bags)
        probs = self.predict_proba(bags) if not merge_logits else None
        if merge_logits:
            z = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return inference.predict_slides(
            bags, probs, aggregation, threshold, bag_logits=logits if merge_logits else None
        )

    def save(self, path, extra=None):
        check_is_fitted(self, "network_")
        meta = {"estimator_params": self.get_params()}
        meta.update(extra or {})
        return save_checkpoint(path, self.network_, meta)

    @classmethod
    def load(cls, path):
        net, meta = load_checkpoint(path)
        est = cls(**meta.get("estimator_params", {}))
        est.network_ = net
        est.classes_ = np.arange(net.n_classes)
        est.meta_ = meta
        return est
