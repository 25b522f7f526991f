import dataclasses

import numpy as np
import pytest
import torch

from unimos.augment import RngStream
from unimos.config import SemiConfig, TrainConfig, dump_config, parse_config
from unimos.datasets import Dataset, DatasetDescriptor, PartialLabelSpec
from unimos.errors import FormatError, ValidationError
from unimos.model import ModelConfig, PyramidUNet
from unimos.trainer import (
    TrainData,
    augment_labeled,
    batch_plan,
    fit,
    load_checkpoint,
    load_train_data,
    lr_at,
    make_optimizer,
    save_checkpoint,
    restore,
    train_step,
)

from conftest import REG, TINY_CONFIG


class TestLearningRate:
    @pytest.mark.parametrize("epoch, lr", [(0, 0.0005), (39, 0.0005), (40, 0.000495), (80, 0.00049005)])
    def test_schedule(self, epoch, lr):
        assert lr_at(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)

    def test_negative_epoch(self):
        with pytest.raises(ValidationError):
            lr_at(-1, TrainConfig())


def _fake_labeled(n_sets, n_items=3, side=16):
    sets = []
    for k in range(n_sets):
        spec = PartialLabelSpec(frozenset({k + 1}))
        images = [np.zeros((side, side), np.float32)] * n_items
        labels = [np.zeros((side, side), np.uint8)] * n_items
        sets.append(Dataset(DatasetDescriptor(f"d{k}", "labeled", spec, []), images, labels))
    return sets


class TestBatchPlan:
    def test_round_robin_per_step(self):
        data = TrainData(REG, _fake_labeled(2), [np.zeros((16, 16), np.float32)] * 5)
        cfg = TrainConfig(steps_per_epoch=4, batch_labeled=2)
        assert [s.dataset for s in batch_plan(cfg, data, 0)] == [0, 1, 0, 1]

    def test_per_epoch_cycle(self):
        data = TrainData(REG, _fake_labeled(3), [])
        cfg = TrainConfig(steps_per_epoch=3, cycle="epoch")
        assert [[s.dataset for s in batch_plan(cfg, data, e)] for e in range(3)] == [[0] * 3, [1] * 3, [2] * 3]

    def test_indices_valid_and_deterministic(self):
        data = TrainData(REG, _fake_labeled(3, n_items=5), [np.zeros((16, 16), np.float32)] * 7)
        cfg = TrainConfig(steps_per_epoch=6, batch_labeled=4, batch_unlabeled=3)
        a, b = batch_plan(cfg, data, 2), batch_plan(cfg, data, 2)
        assert a == b
        for s in a:
            assert len(s.labeled) == 4 and all(0 <= i < 5 for i in s.labeled)
            assert len(s.unlabeled) == 3 and all(0 <= i < 7 for i in s.unlabeled)


class TestLabeledAugment:
    def test_pairs_stay_aligned(self):
        rng = np.random.default_rng(0)
        images = [rng.random((8, 8)).astype(np.float32) for _ in range(20)]
        # label map that encodes the image exactly, so any misalignment shows
        labels = [(img * 255).astype(np.uint8) for img in images]
        out_i, out_l = augment_labeled(images, labels, RngStream(3))
        for img, lab in zip(out_i, out_l):
            assert np.array_equal((img * 255).astype(np.uint8), lab)
        assert any(not np.array_equal(a, b) for a, b in zip(images, out_i))

    def test_deterministic(self):
        images = [np.arange(16, dtype=np.float32).reshape(4, 4)] * 5
        labels = [np.arange(16, dtype=np.uint8).reshape(4, 4)] * 5
        a = augment_labeled(images, labels, RngStream(9))
        b = augment_labeled(images, labels, RngStream(9))
        assert all(np.array_equal(x, y) for x, y in zip(a[0] + a[1], b[0] + b[1]))


def _tiny_model(seed=0, k=4, size=16):
    torch.manual_seed(seed)
    return PyramidUNet(ModelConfig(num_classes=k, size=size, width=4))


class TestTrainStep:
    def test_threshold_extremes(self):
        model = _tiny_model()
        opt = make_optimizer(model, TrainConfig())
        rng = np.random.default_rng(0)
        x = torch.rand(2, 1, 16, 16)
        y = torch.zeros(2, 16, 16, dtype=torch.long)
        unl = [rng.random((16, 16)).astype(np.float32) for _ in range(2)]
        for tau, kept in ((0.0, 1.0), (1.0, 0.0)):
            rep = train_step(model, opt, x, y, {1}, unl, SemiConfig(tau=tau), RngStream(1), 7, 1e-4)
            assert rep.kept_s1 == rep.kept_s2 == rep.kept_fp == kept

    def test_zero_gradient_leaves_parameters(self):
        model = _tiny_model()
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.copy_(torch.tensor([100.0, -100.0, -100.0, -100.0]))
        before = [p.detach().clone() for p in model.parameters()]
        opt = make_optimizer(model, TrainConfig())
        x = torch.rand(2, 1, 16, 16)
        y = torch.zeros(2, 16, 16, dtype=torch.long)
        unl = [np.random.default_rng(i).random((16, 16)).astype(np.float32) for i in range(2)]
        rep = train_step(model, opt, x, y, {1}, unl, SemiConfig(tau=1.0), RngStream(2), 3, 5e-4)
        assert rep.total == pytest.approx(0.5 * rep.l_sup + 0.5 * rep.l_u, abs=1e-12)
        assert rep.l_sup < 1e-6
        for a, b in zip(before, model.parameters()):
            assert torch.equal(a, b)

    def test_supervised_only(self):
        model = _tiny_model()
        opt = make_optimizer(model, TrainConfig())
        rep = train_step(model, opt, torch.rand(2, 1, 16, 16), torch.zeros(2, 16, 16, dtype=torch.long), {1},
                         None, SemiConfig(), RngStream(0), 0, 5e-4)
        assert rep.l_u == 0.0 and rep.total == pytest.approx(0.5 * rep.l_sup, abs=1e-15)

    def test_overfit_single_batch(self):
        model = _tiny_model(seed=1)
        opt = make_optimizer(model, TrainConfig(lr=1e-3))
        rng = np.random.default_rng(1)
        x = torch.from_numpy(rng.random((2, 1, 16, 16)).astype(np.float32))
        y = torch.from_numpy(rng.integers(0, 2, (2, 16, 16)))
        unl = [rng.random((16, 16)).astype(np.float32) for _ in range(2)]
        losses = []
        for step in range(51):
            # same augmentation stream and dropout mask every step: a fixed batch
            rep = train_step(model, opt, x, y, {1}, unl, SemiConfig(tau=0.5), RngStream(4), 9, 1e-3, step)
            losses.append(rep.total)
        assert losses[-1] < losses[0]

    def test_aug_dump(self, tmp_path):
        model = _tiny_model()
        opt = make_optimizer(model, TrainConfig())
        unl = [np.zeros((16, 16), np.float32)] * 3
        with open(tmp_path / "augs.tsv", "w") as fh:
            train_step(model, opt, torch.rand(2, 1, 16, 16), torch.zeros(2, 16, 16, dtype=torch.long), {1},
                       unl, SemiConfig(), RngStream(0), 0, 5e-4, step=4, aug_log=fh)
        lines = (tmp_path / "augs.tsv").read_text().splitlines()
        assert len(lines) == 9 and all(l.startswith("4\t") for l in lines)


class TestConfig:
    def test_defaults_match_published_setup(self):
        cfg = parse_config("")
        assert cfg.train.lr == 0.0005 and cfg.train.lr_step == 40
        assert cfg.model.feature_dropout == 0.5 and cfg.semi.tau == 0.95

    def test_unknown_keys_listed_together(self):
        with pytest.raises(ValidationError) as info:
            parse_config("[train]\nepochs = 3\nfoo = 1\n[semi]\nbar = 2\n[extra]\nx = 1\n")
        msg = str(info.value)
        assert "train.foo" in msg and "semi.bar" in msg and "[extra]" in msg

    def test_bad_values(self):
        with pytest.raises(ValidationError, match="train.lr"):
            parse_config("[train]\nlr = -1\n")
        with pytest.raises(ValidationError, match="train.epochs"):
            parse_config("[train]\nepochs = many\n")

    def test_dump_roundtrip(self, tiny_cfg):
        again = parse_config(dump_config(tiny_cfg))
        for section in ("data", "model", "train", "semi", "phantom"):
            assert getattr(again, section) == getattr(tiny_cfg, section)


class TestFit:
    def test_loads_manifests(self, tiny_cfg):
        data = load_train_data(tiny_cfg)
        assert [d.spec.annotated for d in data.labeled] == [frozenset({1}), frozenset({2}), frozenset({3})]
        assert len(data.unlabeled) == 4

    def test_reports_satisfy_weights(self, tiny_cfg, tmp_path):
        res = fit(tiny_cfg, tmp_path / "run")
        assert len(res.reports) == 12
        for rep in res.reports:
            assert rep.l_u == pytest.approx(0.25 * rep.l_s1 + 0.25 * rep.l_s2 + 0.5 * rep.l_fp, abs=1e-6)
            assert rep.total == pytest.approx(0.5 * rep.l_sup + 0.5 * rep.l_u, abs=1e-6)
        header = (tmp_path / "run" / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,l_sup,l_s1,l_s2,l_fp,l_u,total,kept_s1,kept_s2,kept_fp,lr"
        assert sorted(p.name for p in (tmp_path / "run" / "checkpoints").iterdir()) == ["epoch_0002.ckpt", "epoch_0004.ckpt"]

    def test_deterministic(self, tiny_cfg, tmp_path):
        fit(tiny_cfg, tmp_path / "a")
        fit(tiny_cfg, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_resume_matches_uninterrupted(self, tiny_cfg, tmp_path):
        full = fit(tiny_cfg, tmp_path / "full")
        fit(tiny_cfg, tmp_path / "part", stop_after_epoch=2)
        resumed = fit(tiny_cfg, tmp_path / "part", resume=tmp_path / "part" / "checkpoints" / "epoch_0002.ckpt")
        assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()
        a, b = load_checkpoint(full.checkpoint), load_checkpoint(resumed.checkpoint)
        for k in a.model_state:
            assert torch.equal(a.model_state[k], b.model_state[k]), k

    def test_supervised_only_mode(self, tiny_cfg, tmp_path):
        cfg = dataclasses.replace(tiny_cfg, data=dataclasses.replace(tiny_cfg.data, unlabeled=()))
        res = fit(cfg, tmp_path / "sup")
        for rep in res.reports:
            assert rep.l_u == 0.0 and rep.total == 0.5 * rep.l_sup

    def test_empty_dataset_rejected(self, tiny_cfg, tmp_path):
        data = load_train_data(tiny_cfg)
        data.labeled[0].images.clear()
        with pytest.raises(ValidationError, match="empty"):
            fit(tiny_cfg, tmp_path / "x", data=data)


class TestCheckpoint:
    def test_roundtrip(self, tiny_cfg, tmp_path):
        model = _tiny_model(size=32)
        opt = make_optimizer(model, TrainConfig())
        train_step(model, opt, torch.rand(2, 1, 32, 32), torch.zeros(2, 32, 32, dtype=torch.long), {1}, None,
                   SemiConfig(), RngStream(0), 0, 5e-4)
        path = save_checkpoint(tmp_path / "c.ckpt", model, opt, tiny_cfg, REG, 3, 9, 1.5)
        ck = load_checkpoint(path)
        assert (ck.epoch, ck.global_step, ck.train_seconds) == (3, 9, 1.5)
        assert ck.config_text == TINY_CONFIG and ck.registry == REG.names
        other = _tiny_model(seed=9, size=32)
        opt2 = make_optimizer(other, TrainConfig())
        restore(ck, other, opt2)
        for (k, a), b in zip(model.state_dict().items(), other.state_dict().values()):
            assert torch.equal(a, b), k
        for p, q in zip(model.parameters(), other.parameters()):
            assert torch.equal(opt.state[p]["square_avg"], opt2.state[q]["square_avg"])

    def test_corrupt(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"not a zip")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "bad.ckpt")
