import math
from dataclasses import replace

import numpy as np
import pytest

from entroprune import tensor as T
from entroprune.data import SynthSpec, synthesize
from entroprune.dilution import (AdamW, MaskSchedule, NumericError, TrainConfig, TrainLog,
                                 cosine_lr, evaluate, gradient_stability_report, mask_value,
                                 train, train_dilute)
from entroprune.pipeline import BENCH_DILUTE
from entroprune.vit import BlockMode, Mode, ViTConfig, ViTModel

SMALL = ViTConfig(image_hw=(8, 8), patch_hw=(4, 4), embed_dim=16, depth=3, heads=2,
                  num_classes=3, seed=0)


@pytest.fixture
def small_ds():
    return synthesize(SynthSpec(classes=3, per_class=20, image_size=8, noise=0.2))


class TestSchedules:
    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    @pytest.mark.parametrize("T_", [1, 7, 100])
    def test_endpoints_exact(self, kind, T_):
        s = MaskSchedule(kind, T_)
        assert mask_value(s, 0) == 1.0
        assert mask_value(s, T_) == 0.0
        assert mask_value(s, T_ + 5) == 0.0

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_monotone(self, kind):
        s = MaskSchedule(kind, 37)
        vals = [mask_value(s, t) for t in np.linspace(0, 40, 401)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
        assert all(0.0 <= v <= 1.0 for v in vals)

    def test_linear_midpoint(self):
        assert mask_value(MaskSchedule("linear", 10), 5) == 0.5

    def test_cosine_midpoint(self):
        assert mask_value(MaskSchedule("cosine", 10), 5) == pytest.approx(0.5, abs=1e-15)

    def test_invalid(self):
        with pytest.raises(ValueError):
            mask_value(MaskSchedule("linear", 0), 0)
        with pytest.raises(ValueError):
            mask_value(MaskSchedule("linear", 5), -1)
        with pytest.raises(ValueError):
            MaskSchedule("exponential", 5)
        with pytest.raises(ValueError):
            MaskSchedule("linear", -2)

    def test_zero_length_schedule_is_immediate(self):
        assert MaskSchedule("linear", 0)(0) == 0.0


class TestOptimizer:
    def test_cosine_lr_shape(self):
        assert cosine_lr(0, 10, 1.0, 0.0, warmup=2) == 0.5
        assert cosine_lr(2, 10, 1.0, 0.0, warmup=2) == 1.0
        assert cosine_lr(9, 10, 1.0, 0.1, warmup=2) == pytest.approx(0.1)

    def test_adamw_minimizes_quadratic(self):
        p = {"w": T.Tensor(np.array([[3.0, -2.0]]), requires_grad=True)}
        opt = AdamW(p, lr=0.1, weight_decay=0.0)
        for _ in range(300):
            p["w"].grad = None
            T.backward(T.reduce_sum(T.square(p["w"])))
            opt.step()
        assert np.abs(p["w"].data).max() < 1e-2

    def test_no_decay_on_vectors(self):
        p = {"b": T.Tensor(np.ones(3), requires_grad=True),
             "w": T.Tensor(np.ones((2, 2)), requires_grad=True)}
        for t in p.values():
            t.grad = np.zeros_like(t.data)
        AdamW(p, lr=0.1, weight_decay=0.5).step()
        np.testing.assert_array_equal(p["b"].data, 1.0)
        np.testing.assert_allclose(p["w"].data, 0.95)


class TestTraining:
    def test_loss_decreases_and_deterministic(self, small_ds):
        cfg = TrainConfig(lr=2e-3, epochs=4, batch_size=16)
        logs = []
        for _ in range(2):
            m = ViTModel(SMALL)
            logs.append(train(m, small_ds, cfg))
        np.testing.assert_array_equal(logs[0].losses(), logs[1].losses())
        first, last = logs[0].losses()[:4].mean(), logs[0].losses()[-4:].mean()
        assert last < first

    def test_non_finite_loss(self, small_ds):
        m = ViTModel(SMALL)
        with pytest.raises(NumericError):
            train(m, small_ds, TrainConfig(lr=1e6, epochs=2, batch_size=8))

    def test_dilute_reaches_zero_and_leaves_input(self, small_ds):
        m = ViTModel(SMALL)
        before = {k: v.data.copy() for k, v in m.params.items()}
        cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=16, selected_layers=[0, 2])
        out, log = train_dilute(m, cfg, MaskSchedule("linear", 4), small_ds)
        assert [md.kind for md in out.modes] == [Mode.DILUTED, Mode.FULL, Mode.DILUTED]
        assert out.modes[0].mask == 0.0 and out.modes[2].compensation
        masks = [s.mask for s in log.steps]
        assert masks[0] == 1.0 and masks[4:] == [0.0] * (len(masks) - 4)
        assert all(b <= a for a, b in zip(masks, masks[1:]))
        for k, v in m.params.items():
            np.testing.assert_array_equal(v.data, before[k])
        assert all(md.kind is Mode.FULL for md in m.modes)

    def test_epoch_granularity(self, small_ds):
        cfg = TrainConfig(epochs=3, batch_size=30, selected_layers=[1])
        _, log = train_dilute(ViTModel(SMALL), cfg, MaskSchedule("linear", 2, "epoch"), small_ds)
        assert [s.mask for s in log.steps] == [1.0, 1.0, 0.5, 0.5, 0.0, 0.0]

    def test_schedule_longer_than_training(self, small_ds):
        cfg = TrainConfig(epochs=1, batch_size=16, selected_layers=[1])
        with pytest.raises(ValueError):
            train_dilute(ViTModel(SMALL), cfg, MaskSchedule("linear", 100), small_ds)

    def test_bad_layer(self, small_ds):
        cfg = TrainConfig(epochs=1, selected_layers=[5])
        with pytest.raises(IndexError):
            train_dilute(ViTModel(SMALL), cfg, MaskSchedule("linear", 1), small_ds)

    def test_log_csv_round_trip(self, small_ds):
        cfg = TrainConfig(epochs=1, batch_size=16, selected_layers=[1])
        _, log = train_dilute(ViTModel(SMALL), cfg, MaskSchedule("cosine", 3), small_ds)
        back = TrainLog.from_csv(log.to_csv())
        np.testing.assert_array_equal(back.losses(), log.losses())
        assert [s.mask for s in back.steps] == [s.mask for s in log.steps]
        assert log.to_csv().splitlines()[0] == "step,loss,M,grad_norm_attn,grad_norm_other,lr"

    def test_stability_report(self, small_ds):
        cfg = TrainConfig(epochs=1, batch_size=16, selected_layers=[1])
        _, log = train_dilute(ViTModel(SMALL), cfg, MaskSchedule("linear", 3), small_ds)
        rep = gradient_stability_report(log, compensation=True)
        np.testing.assert_allclose(rep.residual_scale, 2.0 - rep.mask)
        live = rep.mask > 0
        assert np.all(rep.grad_norm_attn[live] > 0)
        assert np.all(rep.grad_norm_attn[~live] == 0)  # branch is cut off at M = 0
        assert np.all(np.isfinite(rep.grad_norm_other))
        assert rep.relative_loss_variation() >= 0
        naive = gradient_stability_report(log, compensation=False)
        assert np.all(naive.residual_scale == 1.0)

    def test_evaluate_keys(self, small_ds):
        res = evaluate(ViTModel(SMALL), small_ds)
        assert set(res) == {"top1", "top5"}
        assert res["top5"] == 1.0  # only 3 classes
        assert math.isfinite(res["top1"])


class TestExamples:
    def test_half_mask_hand_formula(self):
        m = ViTModel(SMALL, np.float64)
        x = m.patch_embed(np.random.default_rng(0).random((4, 8, 8, 3)))
        attn = m.attention_branch(x, 1).data
        m.modes[1] = BlockMode(Mode.DILUTED, 0.5, True)
        out = m.attention_forward(x, 1).data
        assert np.max(np.abs(out - (0.5 * attn + 1.5 * x.data))) < 1e-10

    def test_immediate_removal_drops_accuracy(self, trained6, bench_data):
        train_ds, test_ds = bench_data
        cfg = replace(BENCH_DILUTE, epochs=0, selected_layers=[0])
        cut, _ = train_dilute(trained6, cfg, MaskSchedule("linear", 0), train_ds)
        assert cut.modes[0] == BlockMode(Mode.DILUTED, 0.0, True)
        drop = evaluate(trained6, test_ds)["top1"] - evaluate(cut, test_ds)["top1"]
        assert drop > 0.05

    @pytest.mark.xfail(reason="paired loss-variation gap does not hold on the saturated "
                              "benchmark: the loss reaches ~0 and relative changes are noise",
                       strict=False)
    def test_naive_loss_noisier_than_compensated(self, ablation):
        def variation(comp):
            return sum(gradient_stability_report(ablation[comp, s][1], comp)
                       .relative_loss_variation() for s in (0, 1, 2))
        assert variation(False) > variation(True)
