import json
import math

import numpy as np
import pytest

from pemma import autograd as ag
from pemma.autograd import Tensor, grad_check
from pemma.checkpoint import group_hash, snapshot
from pemma.data import AugmentConfig, PhantomSpec, Sample, generate_phantom
from pemma.evaluation import DiceResult
from pemma.layers import Parameter
from pemma.models import SegModel, build_pemma
from pemma.training import AdamW, DataError, TrainConfig, TrainingError, dice_ce_loss, train


def samples(n, side=16, seed=0, **kw):
    out = []
    for i in range(n):
        ct, pet, lab = generate_phantom(PhantomSpec(seed=seed + i, dims=(side,) * 3, tumor_radius=(2.0, 3.0),
                                                    lymph_radius=(1.5, 2.5), **kw))
        out.append(Sample(f"s{i}", "t", "train", ct, pet, lab))
    return out


def fast_config(**kw):
    base = dict(lr=1e-3, max_steps=4, val_every=2, batch_size=1, crops_per_sample=2,
                augment=AugmentConfig(crop_size=8))
    base.update(kw)
    return TrainConfig(**base)


def const_eval(model):
    return DiceResult(0.5, 0.5)


class TestDiceCELoss:
    def test_perfect_prediction(self, rng):
        labels = rng.integers(0, 3, size=(4, 4, 4))
        logits = Tensor(np.where(np.arange(3)[:, None, None, None] == labels[None], 40.0, -40.0))
        assert dice_ce_loss(logits, labels).item() < 1e-4

    def test_uniform_logits_ce(self, rng):
        labels = rng.integers(0, 3, size=(4, 4, 4))
        loss = dice_ce_loss(Tensor(np.zeros((3, 4, 4, 4))), labels, dice_w=0.0, ce_w=1.0)
        assert loss.item() == pytest.approx(math.log(3), abs=1e-6)

    def test_dice_term_by_hand(self):
        labels = np.zeros((2, 2, 2), int)
        labels[0, 0, 0] = 1
        labels[1, 1, 1] = 2
        loss = dice_ce_loss(Tensor(np.zeros((3, 2, 2, 2))), labels, dice_w=1.0, ce_w=0.0).item()
        # p = 1/3 everywhere: Dice_c = (2/3 + s) / (8/3 + 1 + s) for both foreground classes
        s = 1e-5
        assert loss == pytest.approx(1 - (2 / 3 + s) / (8 / 3 + 1 + s), rel=1e-6)

    def test_gradient(self, rng):
        logits = Tensor(rng.normal(size=(3, 4, 4, 4)))
        labels = rng.integers(0, 3, size=(4, 4, 4))
        assert grad_check(lambda: dice_ce_loss(logits, labels), logits).max_rel_error < 5e-3

    def test_bad_labels(self):
        with pytest.raises(DataError):
            dice_ce_loss(Tensor(np.zeros((3, 2, 2, 2))), np.full((2, 2, 2), 3))

    def test_shape_mismatch(self):
        with pytest.raises(ag.ShapeError):
            dice_ce_loss(Tensor(np.zeros((3, 2, 2, 2))), np.zeros((2, 2, 3), int))


class TestAdamW:
    def test_first_step_closed_form(self):
        p = Parameter(np.array([1.0]))
        p.grad = np.array([1.0])
        AdamW(lr=0.1, weight_decay=0.01).step([("w", p)])
        assert p.data[0] == pytest.approx(1 - 0.1 * (1 / (1 + 1e-8)) - 0.1 * 0.01, rel=1e-6)
        assert p.data[0] == pytest.approx(0.899, abs=1e-6)

    def test_zero_grad_no_decay(self):
        p = Parameter(np.array([0.3, -2.0]))
        p.grad = np.zeros(2)
        AdamW(lr=0.1, weight_decay=0.0).step([("w", p)])
        np.testing.assert_array_equal(p.data, np.array([0.3, -2.0], np.float32))

    def test_protocol_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.weight_decay, c.batch_size) == (1e-4, 1e-5, 2)
        assert (c.dice_w, c.ce_w, c.crops_per_sample) == (1.0, 1.0, 4)

    def test_missing_gradient(self):
        p = Parameter(np.ones(2))
        with pytest.raises(TrainingError):
            AdamW().step([("w", p)])

    def test_state_tracks_trainable_set(self):
        a, b = Parameter(np.ones(2)), Parameter(np.ones(2), trainable=False)
        opt = AdamW()
        a.grad = np.ones(2)
        opt.step([("a", a), ("b", b)])
        assert set(opt.state) == {"a"}
        a.trainable, b.trainable = False, True
        b.grad = np.ones(2)
        opt.step([("a", a), ("b", b)])
        assert set(opt.state) == {"b"} and opt.state["b"]["t"] == 1

    @pytest.mark.parametrize("kw", [{"lr": 0}, {"batch_size": 0}, {"dice_w": 0, "ce_w": 0}, {"modalities": "X"}])
    def test_config_invariants(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrain:
    def test_nothing_trainable(self, tiny_ct):
        before = snapshot(tiny_ct)
        report = train(tiny_ct, samples(2), samples(1), fast_config(trainable_groups=()), evaluate_fn=const_eval)
        for n, p in tiny_ct.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])
        assert report.best_step == 0

    def test_deterministic(self, tiny_config, tmp_path):
        def run(d):
            model = build_pemma(SegModel(tiny_config, rng=np.random.default_rng(1)), rank=2,
                                rng=np.random.default_rng(2))
            rep = train(model, samples(2), samples(1, seed=9), fast_config(seed=4), out_dir=d)
            return rep, (d / "best" / "params.bin").read_bytes()

        (r1, b1), (r2, b2) = run(tmp_path / "a"), run(tmp_path / "b")
        assert r1.best_step == r2.best_step and r1.evals == r2.evals
        assert b1 == b2

    def test_frozen_base_hash(self, tiny_ct):
        model = build_pemma(tiny_ct, rank=2, rng=np.random.default_rng(0))
        h = group_hash(model)
        train(model, samples(2), samples(1), fast_config(max_steps=6), evaluate_fn=const_eval)
        assert group_hash(model) == h == group_hash(tiny_ct)

    def test_report_json(self, tiny_ct, tmp_path):
        rep = train(tiny_ct, samples(2), samples(1), fast_config(modalities="C"), out_dir=tmp_path)
        data = json.loads((tmp_path / "train_report.json").read_text())
        assert [e["step"] for e in data["evals"]] == [0, 2, 4]
        assert set(data["evals"][0]["val"]) == {"tumor", "lymph", "avg"}
        assert data["best_step"] == rep.best_step and data["checkpoint"] == str(tmp_path / "best")

    def test_keeps_best_snapshot(self, tiny_ct):
        scores = iter([0.2, 0.9, 0.1])
        seen = {}

        def fake_eval(model):
            v = next(scores)
            seen[v] = snapshot(model)
            return DiceResult(v, v)

        rep = train(tiny_ct, samples(2), samples(1), fast_config(modalities="C"), evaluate_fn=fake_eval)
        assert rep.best_step == 2 and rep.best_dice == pytest.approx(0.9)
        for n, p in tiny_ct.named_parameters():
            np.testing.assert_array_equal(p.data, seen[0.9][n])

    def test_nan_aborts_with_step_and_lr(self, tiny_ct):
        tiny_ct.blocks[0].fc1.weight.data[0, 0] = np.nan
        with pytest.raises(TrainingError, match=r"step 1 \(lr=0.001\)"):
            train(tiny_ct, samples(2), samples(1), fast_config(modalities="C"), evaluate_fn=const_eval)

    def test_loss_descends_on_threshold_task(self, tiny_config):
        # labels = thresholded PET channel, learnable from PET alone
        data = []
        for s in samples(4):
            lab = (s.pet[0] > 0.35).astype(np.uint8)
            data.append(Sample(s.id, "t", "train", s.ct, s.pet, lab))
        model = SegModel(tiny_config, "unimodal_pet", np.random.default_rng(3))
        cfg = fast_config(lr=3e-3, max_steps=50, val_every=10, batch_size=2, modalities="P")
        rep = train(model, data, data[:1], cfg, evaluate_fn=const_eval)
        losses = [e["train_loss"] for e in rep.evals[1:]]
        assert losses[-1] < losses[0]
