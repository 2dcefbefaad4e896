import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anomaly_expert import autodiff as ad
from anomaly_expert.autodiff import NumericError, Tensor
from anomaly_expert.errors import DataError
from anomaly_expert.params import ExpertConfig, ExpertParams, init_params, load_training_state, save_checkpoint
from anomaly_expert.synth import SynthConfig, synth_generate
from anomaly_expert.training import (
    AdamState,
    TrainConfig,
    adamw_step,
    balanced_bce,
    lr_schedule,
    train,
    train_step,
)


def plain_bce(s, y):
    s = np.clip(np.asarray(s, float), 1e-7, 1 - 1e-7)
    y = np.asarray(y, float)
    return float(np.mean(-(y * np.log(s) + (1 - y) * np.log(1 - s))))


class TestBalancedBCE:
    def test_ln2(self, double):
        assert abs(balanced_bce([0.5, 0.5], [1, 0]).item() - math.log(2)) <= 1e-9

    def test_perfect_scores(self, double):
        loss = balanced_bce([1 - 1e-7, 1e-7], [1, 0]).item()
        assert 0 <= loss <= 1e-6
        assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)

    def test_clamp_keeps_loss_finite(self, double):
        loss = balanced_bce([1.0, 0.0], [0, 1]).item()
        assert loss == pytest.approx(-math.log(1e-7), rel=1e-9)

    def test_equal_counts_reduce_to_plain(self, double):
        rng = np.random.default_rng(0)
        s, y = rng.random(10), np.array([0, 1] * 5)
        assert balanced_bce(s, y).item() == pytest.approx(plain_bce(s, y), abs=1e-12)

    def test_hand_weights(self, double):
        s, y = np.array([0.9, 0.2, 0.3, 0.4]), np.array([1, 0, 0, 0])
        w = np.array([4 / 2, 4 / 6, 4 / 6, 4 / 6])
        per = -(y * np.log(s) + (1 - y) * np.log(1 - s))
        assert balanced_bce(s, y).item() == pytest.approx(float(np.mean(w * per)), abs=1e-12)

    def test_single_class_flag(self, double):
        loss, balanced = balanced_bce([0.3, 0.6], [1, 1], return_flag=True)
        assert not balanced
        assert loss.item() == pytest.approx(plain_bce([0.3, 0.6], [1, 1]), abs=1e-12)

    def test_gradient(self, double):
        rng = np.random.default_rng(1)
        y = np.array([1, 0, 0, 1, 0])
        err = ad.grad_check(lambda s: balanced_bce(s, y), [Tensor(rng.uniform(0.05, 0.95, 5))])
        assert err < 1e-4

    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
    def test_non_negative_finite(self, pairs):
        with ad.precision("double"):
            s, y = zip(*pairs)
            loss = balanced_bce(list(s), list(y)).item()
        assert np.isfinite(loss) and loss >= 0

    def test_empty(self):
        with pytest.raises(ValueError):
            balanced_bce([], [])


class TestSchedule:
    def test_values(self):
        cfg = TrainConfig(restart_period=10)
        assert lr_schedule(0, cfg) == pytest.approx(1e-4, abs=1e-12)
        assert lr_schedule(5, cfg) == pytest.approx(5e-5, abs=1e-12)
        assert lr_schedule(10, cfg) == pytest.approx(1e-4, abs=1e-12)

    @given(st.integers(0, 10_000), st.integers(1, 200))
    def test_periodic(self, step, T):
        cfg = TrainConfig()
        assert lr_schedule(step + T, cfg, T) == lr_schedule(step, cfg, T)

    def test_default_period_half_epoch(self):
        assert TrainConfig().period(25) == 13
        assert TrainConfig().period(1) == 1
        assert TrainConfig(restart_period=7).period(25) == 7

    def test_eta_min_floor(self):
        cfg = TrainConfig(eta_min=1e-6, restart_period=4)
        assert min(lr_schedule(s, cfg) for s in range(8)) >= 1e-6

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, TrainConfig(restart_period=2))
        with pytest.raises(ValueError):
            TrainConfig(lr0=0.0)


def toy_params(values: dict[str, np.ndarray]) -> ExpertParams:
    return ExpertParams(ExpertConfig(), {k: Tensor(v, requires_grad=True) for k, v in values.items()})


class TestAdamW:
    def test_zero_grad_no_decay(self, double):
        p = toy_params({"w": np.array([1.0, -2.0])})
        p["w"].grad = np.zeros(2)
        adamw_step(p, AdamState(), 1e-2, TrainConfig(weight_decay=0.0))
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_sign(self, double):
        p = toy_params({"w": np.array([1.0, -2.0, 0.5])})
        g = np.array([0.3, -4.0, 2.0])
        p["w"].grad = g.copy()
        adamw_step(p, AdamState(), 1e-3, TrainConfig(weight_decay=0.0))
        np.testing.assert_allclose(p["w"].data, [1.0, -2.0, 0.5] - 1e-3 * np.sign(g), atol=1e-10)

    def test_decay_only(self, double):
        p = toy_params({"w": np.array([1.0, -2.0])})
        p["w"].grad = np.zeros(2)
        adamw_step(p, AdamState(), 0.1, TrainConfig(weight_decay=0.5))
        np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5), atol=1e-15)

    def test_nan_gradient_named(self, double):
        p = toy_params({"good": np.ones(2), "bad": np.ones(2)})
        p["good"].grad = np.zeros(2)
        p["bad"].grad = np.array([np.nan, 0.0])
        with pytest.raises(NumericError, match="bad"):
            adamw_step(p, AdamState(), 1e-3, TrainConfig())


def tiny_data(seed=0):
    cfg = SynthConfig(n_classes=2, images_per_class=16, g=4, d_enc=8, patch_size=2, seed=seed)
    return synth_generate(cfg), ExpertConfig(d_enc=8, d=8, g=4, n_heads=2, seed=seed)


class TestLoop:
    def test_deterministic(self):
        bundles, ecfg = tiny_data()
        cfg = TrainConfig(epochs=1, batch_size=8, lr0=1e-2)
        a, _, ra = train(bundles, cfg, ecfg)
        b, _, rb = train(bundles, cfg, ecfg)
        assert a.equals(b) and ra.step_loss == rb.step_loss

    def test_loss_finite_and_decreasing(self):
        bundles, ecfg = tiny_data(1)
        _, _, rep = train(bundles, TrainConfig(epochs=3, batch_size=8, lr0=1e-2), ecfg)
        assert all(np.isfinite(rep.step_loss))
        k = len(rep.step_loss) // 3
        assert np.mean(rep.step_loss[-k:]) < np.mean(rep.step_loss[:k])

    def test_single_class_set_rejected(self):
        bundles, ecfg = tiny_data()
        with pytest.raises(DataError):
            train([b for b in bundles if b.label == 0], TrainConfig(), ecfg)

    def test_resume_matches_continuous(self, tmp_path):
        bundles, ecfg = tiny_data(2)
        cfg = TrainConfig(epochs=1, batch_size=8, lr0=1e-2, precision="double", restart_period=3)
        batches = [bundles[i : i + 8] for i in range(0, 32, 8)]
        with ad.precision("double"):
            p = init_params(ecfg)
            state = AdamState()
            for k in range(2):
                train_step(p, state, batches[k], lr_schedule(k, cfg), cfg)
            save_checkpoint(p, tmp_path / "mid.aovc", optimizer_state=state)
            for k in range(2, 4):
                train_step(p, state, batches[k], lr_schedule(k, cfg), cfg)
            q, qstate = load_training_state(tmp_path / "mid.aovc")
            assert qstate.step == 2
            for k in range(2, 4):
                train_step(q, qstate, batches[k], lr_schedule(k, cfg), cfg)
        for name, t in p:
            assert t.data.tobytes() == q[name].data.tobytes(), name

    def test_trainable_tau(self):
        bundles, _ = tiny_data()
        ecfg = ExpertConfig(d_enc=8, d=8, g=4, n_heads=2, train_tau=True)
        p, _, _ = train(bundles, TrainConfig(epochs=1, batch_size=8, lr0=1e-2), ecfg)
        assert float(p["tau"].data) != pytest.approx(0.07, abs=0)
