import math

import numpy as np
import pytest
import torch

from amilpath.mil_core import InstanceEmbedder, MILNetwork
from amilpath.training import (
    BagData,
    TrainConfig,
    cycle_position,
    load_checkpoint,
    lr_at,
    lr_schedule,
    save_checkpoint,
    train,
)


def feature_bags(n=20, d=192, n_inst=5, seed=0, signal=1.5):
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(n):
        y = i % 2
        x = rng.normal(size=(n_inst, d))
        x[:, :4] += signal * y
        bags.append(BagData(x.astype(np.float32), label=y, slide_id=f"s{i}", bag_id=f"b{i}"))
    return bags


def network(seed=0, clinical_dim=0):
    torch.manual_seed(seed)
    return MILNetwork(InstanceEmbedder("toy"), 16, 2, clinical_dim)


class TestSchedule:
    def test_closed_form_two_cycles(self):
        lr_max, lr_min = 1e-3, 1e-5
        expected = []
        for t_i in (3, 6):
            for t in range(t_i):
                expected.append(lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / t_i)))
        assert lr_schedule(9, 3, 2, lr_min, lr_max) == expected

    def test_matches_torch_scheduler(self):
        p = torch.nn.Parameter(torch.zeros(1))
        opt = torch.optim.SGD([p], lr=1e-3)
        sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=3, T_mult=2, eta_min=1e-5)
        ref = []
        for _ in range(9):
            ref.append(opt.param_groups[0]["lr"])
            opt.step()
            sched.step()
        assert np.allclose(lr_schedule(9, 3, 2, 1e-5, 1e-3), ref, rtol=1e-12)

    def test_restart_positions(self):
        assert [cycle_position(e, 3, 2) for e in (0, 2, 3, 8, 9)] == [(0, 3), (2, 3), (0, 6), (5, 6), (0, 12)]
        assert cycle_position(7, 2, 1) == (1, 2)

    def test_endpoints(self):
        assert lr_at(0, 5, 0.0, 1.0) == 1.0
        assert lr_at(5, 5, 0.1, 1.0) == pytest.approx(0.1)
        with pytest.raises(ValueError):
            lr_at(6, 5, 0.0, 1.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_min=1.0, lr_max=0.1)


class TestTrain:
    def test_zero_epochs_returns_initial(self):
        net = network()
        before = {k: v.clone() for k, v in net.state_dict().items()}
        state, hist = train(feature_bags(), None, net, TrainConfig(epochs=0))
        assert hist.rows == []
        assert all(torch.equal(before[k], state[k]) for k in before)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=3, lr_max=1e-2, seed=5)
        _, h1 = train(feature_bags(), None, network(), cfg)
        _, h2 = train(feature_bags(), None, network(), cfg)
        assert h1.losses == h2.losses

    def test_learns_separable(self):
        bags = feature_bags(40)
        val = feature_bags(20, seed=1)
        _, hist = train(bags, val, network(), TrainConfig(epochs=15, lr_max=1e-2, t0=15))
        assert hist.losses[-1] < hist.losses[0]
        assert hist.best_val_auc >= 0.9

    def test_weight_decay_shrinks_with_zero_gradient(self):
        # zero data gradient: only the coupled L2 term moves the weights
        net = network()
        w = net.classifier.weight
        opt = torch.optim.Adam([w], lr=1e-3, weight_decay=1e-1)
        before = w.detach().norm().item()
        for _ in range(5):
            opt.zero_grad()
            w.grad = torch.zeros_like(w)
            opt.step()
        assert w.detach().norm().item() < before

    def test_single_class_validation_fatal(self):
        val = [b for b in feature_bags() if b.label == 1]
        with pytest.raises(ValueError, match="single class"):
            train(feature_bags(), val, network(), TrainConfig(epochs=1))

    def test_history_csv(self, tmp_path):
        _, hist = train(feature_bags(), feature_bags(seed=2), network(), TrainConfig(epochs=2))
        hist.to_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_auc,lr" and len(lines) == 3

    def test_image_bags_frozen_and_finetuned(self):
        rng = np.random.default_rng(0)
        bags = [BagData(rng.integers(0, 255, (3, 16, 16, 3), dtype=np.uint8), label=i % 2,
                        slide_id=f"s{i}", bag_id=f"b{i}") for i in range(6)]
        for freeze in (True, False):
            _, hist = train(bags, None, network(), TrainConfig(epochs=2), freeze_embedder=freeze)
            assert len(hist.rows) == 2 and np.isfinite(hist.losses).all()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = network(clinical_dim=3)
        bags = feature_bags(10)
        clin = torch.randn(10, 3)
        x = torch.as_tensor(np.stack([b.instances for b in bags]))
        net.eval()
        with torch.no_grad():
            ref, _ = net.forward_features(x, clin)
        meta = save_checkpoint(tmp_path / "m.ckpt", net, {"seed": 0})
        assert meta["D"] == 192 and meta["C"] == 3
        net2, meta2 = load_checkpoint(tmp_path / "m.ckpt")
        with torch.no_grad():
            out, _ = net2.forward_features(x, clin)
        assert torch.allclose(torch.softmax(ref, -1), torch.softmax(out, -1), atol=1e-6)
        assert meta2["seed"] == 0

    def test_bad_version(self, tmp_path):
        import json
        import zipfile

        save_checkpoint(tmp_path / "m.ckpt", network())
        with zipfile.ZipFile(tmp_path / "m.ckpt") as zf:
            params, meta = zf.read("params.pt"), json.loads(zf.read("meta.json"))
        meta["version"] = 99
        with zipfile.ZipFile(tmp_path / "bad.ckpt", "w") as zf:
            zf.writestr("params.pt", params)
            zf.writestr("meta.json", json.dumps(meta))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tmp_path / "bad.ckpt")
