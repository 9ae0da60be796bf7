"""Instance embedders, attention-based MIL pooling and clinical fusion."""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

EMBEDDERS = ("alexnet", "vgg16_bn", "resnet50", "densenet121", "inception_v3", "toy")
# ImageNet channel statistics, used to normalize RGB patches for every backbone
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CLINICAL_REPEAT = 10
PROB_FLOOR = 1e-12


class ToyEmbedder(nn.Module):
    """Average-pools an image to ``size`` x ``size`` and exposes it as a (3*size*size, 1, 1) map.

    On inputs that already are ``size``-pixel thumbnails it is the identity
    followed by a flatten.
    """

    def __init__(self, size=8):
        super().__init__()
        self.size = size

    def forward(self, x):
        x = F.adaptive_avg_pool2d(x, self.size)
        return x.reshape(x.shape[0], -1, 1, 1)


class InstanceEmbedder(nn.Module):
    """CNN trunk mapping a batch of 3xHxW images to a (C, h, w) feature map each."""

    def __init__(self, name="toy", pretrained=False, input_size=256, toy_size=8):
        super().__init__()
        if name not in EMBEDDERS:
            raise ValueError(f"unknown embedder {name!r}; choose from {EMBEDDERS}")
        self.name = name
        self.pretrained = pretrained
        self.input_size = None if name == "toy" else input_size
        self.trunk = _build_trunk(name, pretrained, toy_size)
        if name == "toy":
            self.output_shape = (3 * toy_size * toy_size, 1, 1)
        else:
            with torch.no_grad():
                was_training = self.trunk.training
                self.trunk.eval()
                out = self.trunk(torch.zeros(1, 3, input_size, input_size))
                self.trunk.train(was_training)
            self.output_shape = tuple(out.shape[1:])

    @property
    def trainable(self):
        return any(True for _ in self.parameters())

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected images of shape (B, 3, H, W), got {tuple(x.shape)}")
        if self.input_size is not None and tuple(x.shape[2:]) != (self.input_size,) * 2:
            raise ValueError(
                f"{self.name} expects {self.input_size}x{self.input_size} inputs, got {tuple(x.shape[2:])}"
            )
        return self.trunk(x)


def _build_trunk(name, pretrained, toy_size):
    if name == "toy":
        return ToyEmbedder(toy_size)
    import torchvision.models as tvm

    weights = "DEFAULT" if pretrained else None
    try:
        if name == "vgg16_bn":
            m = tvm.vgg16_bn(weights=weights)
            return nn.Sequential(m.features, m.avgpool)
        if name == "alexnet":
            m = tvm.alexnet(weights=weights)
            return nn.Sequential(m.features, m.avgpool)
        if name == "resnet50":
            m = tvm.resnet50(weights=weights)
            return nn.Sequential(*list(m.children())[:-2])
        if name == "densenet121":
            m = tvm.densenet121(weights=weights)
            return nn.Sequential(m.features, nn.ReLU(inplace=False))
        m = tvm.inception_v3(weights=weights, aux_logits=pretrained, init_weights=not pretrained)
        return nn.Sequential(*[c for n, c in m.named_children() if n not in ("AuxLogits", "avgpool", "dropout", "fc")])
    except Exception as exc:  # weight download / cache failures
        raise RuntimeError(f"could not build {name} (pretrained={pretrained}): {exc}") from exc


def instance_embed(images, embedder):
    """N images -> N x D features: backbone map, spatial max-pool, flatten."""
    fmap = embedder(images)
    return torch.amax(fmap, dim=(2, 3))


def images_to_tensor(images, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """uint8 N x H x W x 3 (or float in [0, 1]) -> normalized float N x 3 x H x W."""
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected N x H x W x 3 images, got {arr.shape}")
    x = torch.from_numpy(arr.astype(np.float32))
    if arr.dtype == np.uint8:
        x = x / 255.0
    x = x.permute(0, 3, 1, 2)
    m = torch.tensor(mean).view(1, 3, 1, 1)
    s = torch.tensor(std).view(1, 3, 1, 1)
    return (x - m) / s


@dataclass
class AttentionOutput:
    weights: np.ndarray  # (N,)
    pooled: np.ndarray  # (D,)


@dataclass
class BagPrediction:
    probs: np.ndarray
    attention: AttentionOutput


class AttentionPooling(nn.Module):
    """Two-layer scoring network (D -> H, tanh, H -> 1) with softmax over the instances."""

    def __init__(self, in_dim, hidden_dim=128):
        super().__init__()
        self.score = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.Tanh(), nn.Linear(hidden_dim, 1))

    def forward(self, h):
        # h: B x N x D
        if h.shape[-2] == 0:
            raise ValueError("attention pooling needs at least one instance")
        a = self.score(h).squeeze(-1)
        w = torch.softmax(a, dim=-1)
        pooled = torch.einsum("bn,bnd->bd", w, h)
        return pooled, w


class MILNetwork(nn.Module):
    """Embedder + attention pooling + linear classifier over [pooled, clinical x repeat]."""

    def __init__(self, embedder, hidden_dim=128, n_classes=2, clinical_dim=0,
                 clinical_repeat=CLINICAL_REPEAT):
        super().__init__()
        self.embedder = embedder
        self.feature_dim = int(embedder.output_shape[0]) if embedder is not None else None
        self.hidden_dim = hidden_dim
        self.n_classes = n_classes
        self.clinical_dim = clinical_dim
        self.clinical_repeat = clinical_repeat
        self.attention = AttentionPooling(self.feature_dim, hidden_dim)
        self.classifier = nn.Linear(self.classifier_in_dim, n_classes)
        # fixed instance-feature scaling; identity unless set_feature_scaling is called
        self.register_buffer("feature_mean", torch.zeros(self.feature_dim))
        self.register_buffer("feature_scale", torch.ones(self.feature_dim))

    def set_feature_scaling(self, mean, scale):
        self.feature_mean.copy_(torch.as_tensor(mean, dtype=self.feature_mean.dtype))
        self.feature_scale.copy_(torch.as_tensor(scale, dtype=self.feature_scale.dtype))

    @property
    def classifier_in_dim(self):
        return self.feature_dim + self.clinical_repeat * self.clinical_dim

    def embed(self, images):
        """B x N x 3 x H x W -> B x N x D."""
        b, n = images.shape[:2]
        feats = instance_embed(images.reshape(b * n, *images.shape[2:]), self.embedder)
        return feats.reshape(b, n, -1)

    def fuse(self, pooled, clinical=None):
        if self.clinical_dim == 0:
            if clinical is not None and clinical.shape[-1] != 0:
                raise ValueError("model was built without clinical input but a clinical vector was given")
            return pooled
        if clinical is None:
            raise ValueError(f"model expects a clinical vector of width {self.clinical_dim}")
        if clinical.shape[-1] != self.clinical_dim:
            raise ValueError(
                f"clinical width {clinical.shape[-1]} differs from trained width {self.clinical_dim}"
            )
        return torch.cat([pooled, clinical.repeat(1, self.clinical_repeat)], dim=-1)

    def forward_features(self, feats, clinical=None):
        """Pre-computed instance features B x N x D -> (logits B x K, weights B x N)."""
        if feats.shape[-1] != self.feature_dim:
            raise ValueError(f"expected feature width {self.feature_dim}, got {feats.shape[-1]}")
        pooled, w = self.attention((feats - self.feature_mean) / self.feature_scale)
        return self.classifier(self.fuse(pooled, clinical)), w

    def forward(self, images, clinical=None):
        return self.forward_features(self.embed(images), clinical)


def attention_pool(features, pooling):
    """Single bag N x D (array or tensor) -> AttentionOutput."""
    h = torch.as_tensor(np.asarray(features), dtype=next(pooling.parameters()).dtype)
    if h.ndim != 2:
        raise ValueError(f"expected an N x D matrix, got shape {tuple(h.shape)}")
    if h.shape[0] == 0:
        raise ValueError("attention pooling needs at least one instance")
    with torch.no_grad():
        pooled, w = pooling(h.unsqueeze(0))
    return AttentionOutput(w[0].numpy(), pooled[0].numpy())


def fuse_and_classify(pooled, clinical_vec, network):
    """Pooled embedding (+ optional clinical vector) -> class probabilities."""
    dtype = network.classifier.weight.dtype
    p = torch.as_tensor(np.asarray(pooled), dtype=dtype).reshape(1, -1)
    c = None if clinical_vec is None else torch.as_tensor(np.asarray(clinical_vec), dtype=dtype).reshape(1, -1)
    with torch.no_grad():
        logits = network.classifier(network.fuse(p, c))
    return torch.softmax(logits, dim=-1)[0].numpy()


def cross_entropy(probs, labels):
    """Mean of -log p(label) over a batch; probabilities are floored at 1e-12."""
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    picked = p[np.arange(len(labels)), labels]
    if np.any(picked < PROB_FLOOR):
        warnings.warn("probability of the true class below 1e-12; clamped")
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))
