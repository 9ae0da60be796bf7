import numpy as np
import pytest
import torch
from sklearn.base import clone

from amilpath.estimator import AttentionMILClassifier, as_bags
from amilpath.mil_core import InstanceEmbedder, MILNetwork, attention_pool
from amilpath.training import BagData


def random_bags(n, d=192, seed=0, shift=2.0):
    rng = np.random.default_rng(seed)
    X, y = [], []
    for i in range(n):
        label = i % 2
        inst = rng.normal(size=(rng.integers(3, 8), d)).astype(np.float32)
        inst[:, :3] += shift * label
        X.append(BagData(inst, slide_id=f"s{i}", bag_id=f"b{i}"))
        y.append(label)
    return X, np.array(y)


def test_get_params_and_clone():
    est = AttentionMILClassifier(hidden_dim=32, epochs=5, lr_max=1e-3)
    params = est.get_params()
    assert params["hidden_dim"] == 32 and params["embedder"] == "toy"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(epochs=7)
    assert est.epochs == 7


def test_fit_predict_shapes():
    X, y = random_bags(24)
    est = AttentionMILClassifier(hidden_dim=16, epochs=8, lr_max=1e-2, t0=8, standardize=True).fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (24, 2) and np.allclose(proba.sum(1), 1)
    assert est.score(X, y) >= 0.9
    att = est.attention(X)
    assert [len(a) for a in att] == [len(b.instances) for b in X]
    assert all(abs(a.sum() - 1) < 1e-5 for a in att)


def test_not_fitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        AttentionMILClassifier().predict(random_bags(2)[0])


def test_save_load_round_trip(tmp_path):
    X, y = random_bags(12)
    est = AttentionMILClassifier(hidden_dim=8, epochs=2, standardize=True).fit(X, y)
    est.save(tmp_path / "m.ckpt")
    back = AttentionMILClassifier.load(tmp_path / "m.ckpt")
    assert back.get_params() == est.get_params()
    assert np.allclose(back.predict_proba(X), est.predict_proba(X), atol=1e-6)


def test_predict_slides_groups_bags():
    X, y = random_bags(6)
    for i, b in enumerate(X):
        b.slide_id = f"slide{i // 3}"
    est = AttentionMILClassifier(hidden_dim=8, epochs=1).fit(X, y)
    preds = est.predict_slides(X)
    assert [p.slide_id for p in preds] == ["slide0", "slide1"]
    assert np.allclose(preds[0].class_probs, est.predict_proba(X[:3]).mean(0))


def test_as_bags_accepts_arrays():
    bags = as_bags([np.zeros((2, 4)), np.ones((3, 4))], [0, 1])
    assert [b.label for b in bags] == [0, 1] and bags[1].slide_id == "bag1"
    with pytest.raises(ValueError):
        as_bags([np.zeros((0, 4))])


def test_mil_invariants_random_bags():
    """200 random bags, N in 1..64: weights sum to 1 and outputs ignore instance order."""
    torch.manual_seed(0)
    net = MILNetwork(InstanceEmbedder("toy"), 32, 2, 0).double().eval()
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 65))
        h = torch.as_tensor(rng.normal(size=(1, n, 192)) * rng.uniform(0.1, 5))
        perm = torch.as_tensor(rng.permutation(n))
        with torch.no_grad():
            logits, w = net.forward_features(h)
            logits_p, w_p = net.forward_features(h[:, perm])
        assert abs(float(w.sum()) - 1) <= 1e-6
        assert torch.allclose(torch.softmax(logits, -1), torch.softmax(logits_p, -1), atol=1e-5)
        assert torch.allclose(w[0, perm], w_p[0], atol=1e-6)
    assert attention_pool(np.ones((1, 192)), net.attention).weights.tolist() == [1.0]
