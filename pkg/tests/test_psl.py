"""Auxiliary masks, the two-term loss, prohibitive inference and training."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeseg import metrics, models, psl
from aeseg import tensor as T
from aeseg.fusion import IGNORE
from aeseg.models import Topology, TrainConfig
from aeseg.tensor import Tensor

TOPO = Topology(n_classes=3, channels=(4, 6), strides=(2, 1), image_size=(16, 16))
CFG = TrainConfig(epochs=3, batch_size=4, learning_rate=0.05, seed=1)


def softmax(raw, axis=0):
    e = np.exp(raw - raw.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def toy_set(n=8, seed=0):
    r = np.random.default_rng(seed)
    x = r.uniform(size=(n, 16, 16, 3))
    masks = r.integers(0, 4, size=(n, 16, 16)).astype(np.uint8)
    masks[r.random(masks.shape) < 0.3] = IGNORE
    labels = [tuple(sorted(r.choice(3, 1 + i % 2, replace=False))) for i in range(n)]
    return x, labels, masks


def squares(seed=5):
    """Eight images, one bright square each, coloured by its class."""
    r = np.random.default_rng(seed)
    x = r.uniform(0.0, 0.2, size=(8, 16, 16, 3))
    gt = np.zeros((8, 16, 16), np.uint8)
    labels = []
    for i in range(8):
        c = i % 3
        gt[i, 4:12, 4:12] = c + 1
        x[i, 4:12, 4:12, c] = 0.9
        labels.append((c,))
    return x, labels, gt


class TestAuxiliaryMask:
    def test_hand_example(self):
        scores = np.array([0.4, 0.35, 0.25]).reshape(3, 1, 1)
        assert psl.weighted_auxiliary_mask(scores, np.array([0.5, 0.9]))[0, 0] == 0

    def test_unit_weights_give_plain_argmax(self, rng):
        scores = softmax(rng.normal(size=(4, 5, 5)))
        np.testing.assert_array_equal(psl.weighted_auxiliary_mask(scores, np.ones(3)), scores.argmax(axis=0))

    def test_tie_goes_to_background(self):
        scores = np.full((3, 2, 2), 1 / 3)
        assert not psl.weighted_auxiliary_mask(scores, np.ones(2)).any()

    def test_batched(self, rng):
        scores = softmax(rng.normal(size=(2, 4, 3, 3)), axis=1)
        v = rng.uniform(size=(2, 3))
        out = psl.weighted_auxiliary_mask(scores, v)
        np.testing.assert_array_equal(out[1], psl.weighted_auxiliary_mask(scores[1], v[1]))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            psl.weighted_argmax(rng.uniform(size=(2, 4, 3, 3)), np.ones((2, 3)))

    def test_augmented_weights(self):
        np.testing.assert_array_equal(psl.augmented_weights(np.array([[0.2, 0.7]])), [[1.0, 0.2, 0.7]])


class TestSuppression:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 6), st.floats(1e-3, 1e3))
    def test_zero_weight_never_wins_and_scaling(self, seed, n_classes, scale):
        r = np.random.default_rng(seed)
        scores = softmax(r.normal(scale=3, size=(n_classes + 1, 5, 5)))
        v = r.uniform(size=n_classes)
        v[r.random(n_classes) < 0.5] = 0.0
        s_hat = psl.weighted_auxiliary_mask(scores, v)
        zero = 1 + np.flatnonzero(v == 0)
        assert not np.isin(s_hat, zero).any()
        scaled = psl.weighted_argmax(scores, scale * psl.augmented_weights(v))
        np.testing.assert_array_equal(scaled, s_hat)
        p = float(r.uniform(0, 0.9))
        pred = psl.weighted_argmax(scores, psl.augmented_weights(psl.prohibit(v, p)))
        assert not np.isin(pred, 1 + np.flatnonzero(v < p)).any()


class TestProhibit:
    def test_rule(self):
        np.testing.assert_array_equal(psl.prohibit(np.array([0.05, 0.9, 0.1]), 0.1), [0.0, 0.9, 0.1])

    def test_zero_p_is_identity(self, rng):
        v = rng.uniform(size=5)
        np.testing.assert_array_equal(psl.prohibit(v, 0.0), v)

    @pytest.mark.parametrize("p", [-0.1, 1.0])
    def test_bounds(self, p):
        with pytest.raises(ValueError):
            psl.prohibit(np.ones(2), p)


class TestLoss:
    def test_perfect_scores(self):
        S = np.array([[0, 1], [2, IGNORE]])
        scores = np.zeros((3, 2, 2))
        for (i, j), c in np.ndenumerate(S):
            scores[c if c != IGNORE else 0, i, j] = 1.0
        assert psl.psl_loss(Tensor(scores), S, S).item() < 1e-10

    def test_uniform_scores(self, rng):
        S = rng.integers(0, 4, size=(3, 3))
        loss = psl.psl_loss(Tensor(np.full((4, 3, 3), 0.25)), S, rng.integers(0, 4, size=(3, 3)))
        assert loss.item() == pytest.approx(2 * np.log(4), rel=1e-14)

    def test_matches_pixel_loop(self, rng):
        scores = softmax(rng.normal(size=(4, 3, 3)))
        S = rng.integers(0, 4, size=(3, 3))
        S[0, 1] = S[2, 2] = IGNORE
        S_hat = rng.integers(0, 4, size=(3, 3))
        want = 0.0
        for mask in (S, S_hat):
            total, count = 0.0, 0
            for i in range(3):
                for j in range(3):
                    if mask[i, j] != IGNORE:
                        total -= np.log(scores[mask[i, j], i, j])
                        count += 1
            want += total / count
        assert psl.psl_loss(Tensor(scores), S, S_hat).item() == pytest.approx(want, rel=1e-13)

    def test_shat_weight(self, rng):
        scores = Tensor(softmax(rng.normal(size=(4, 3, 3))))
        S, S_hat = rng.integers(0, 4, size=(2, 3, 3))
        a = psl.psl_loss(scores, S, None).item()
        b = psl.psl_loss(scores, None, S_hat).item()
        assert psl.psl_loss(scores, S, S_hat, shat_weight=0.5).item() == pytest.approx(a + 0.5 * b)

    def test_empty_mask_counts(self):
        counters = psl.PSLCounters()
        empty = np.full((2, 2), IGNORE)
        loss = psl.psl_loss(Tensor(np.full((3, 2, 2), 1 / 3)), empty, np.zeros((2, 2), int), counters=counters)
        assert counters.empty_masks == 1
        assert loss.item() == pytest.approx(np.log(3))

    def test_ignore_neutrality(self, rng):
        scores = softmax(rng.normal(size=(4, 4, 4)))
        S = rng.integers(0, 4, size=(4, 4))
        S[1:3, 1:3] = IGNORE
        flipped = scores.copy()
        flipped[:, 1:3, 1:3] = flipped[::-1, 1:3, 1:3]
        assert psl.psl_loss(Tensor(scores), S, S).item() == psl.psl_loss(Tensor(flipped), S, S).item()

    def test_gradient(self, rng):
        raw = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
        S = rng.integers(0, 4, size=(3, 3))
        S[0, 0] = IGNORE
        S_hat = rng.integers(0, 4, size=(3, 3))
        err = T.gradient_check(lambda: psl.psl_loss(T.softmax(raw, axis=0), S, S_hat), [raw])
        assert err < 1e-5


class TestInference:
    def test_p_zero_equals_raw_weights(self, rng):
        m = models.init_model(TOPO, 2, "segmentation")
        x = rng.uniform(size=(3, 16, 16, 3))
        v, scores = psl.predict_scores(m, x)
        np.testing.assert_array_equal(psl.prohibitive_inference(m, x, 0.0),
                                      psl.weighted_auxiliary_mask(scores, v))

    def test_suppressed_class_absent(self, rng):
        m = models.init_model(TOPO, 2, "segmentation")
        x = rng.uniform(size=(2, 16, 16, 3))
        override = np.array([[0.05, 0.9, 0.5], [0.05, 0.9, 0.5]])
        pred = psl.prohibitive_inference(m, x, 0.1, override_v=override)
        assert not (pred == 1).any()

    def test_ground_truth_override(self, rng):
        m = models.init_model(TOPO, 3, "segmentation")
        x = rng.uniform(size=(2, 16, 16, 3))
        gt_v = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
        pred = psl.prohibitive_inference(m, x, 0.1, override_v=gt_v)
        assert set(np.unique(pred[0])) <= {0, 1}
        assert set(np.unique(pred[1])) <= {0, 2, 3}
        _, scores = psl.predict_scores(m, x)
        np.testing.assert_array_equal(pred, psl.weighted_argmax(scores, psl.augmented_weights(gt_v)))

    def test_single_image(self, rng):
        m = models.init_model(TOPO, 3, "segmentation")
        x = rng.uniform(size=(2, 16, 16, 3))
        np.testing.assert_array_equal(psl.prohibitive_inference(m, x[1], 0.1),
                                      psl.prohibitive_inference(m, x, 0.1)[1])

    def test_override_shape(self, rng):
        m = models.init_model(TOPO, 3, "segmentation")
        with pytest.raises(ValueError):
            psl.prohibitive_inference(m, rng.uniform(size=(2, 16, 16, 3)), 0.1, override_v=np.ones((2, 2)))


class TestTraining:
    def test_deterministic(self):
        x, labels, masks = toy_set()
        a = psl.train_psl(x, labels, masks, CFG, TOPO)
        b = psl.train_psl(x, labels, masks, CFG, TOPO)
        assert a.history == b.history
        assert models.parameter_digest(a.model) == models.parameter_digest(b.model)

    def test_zero_weights_equal_plain_training(self):
        x, labels, masks = toy_set()
        plain = psl.train_psl(x, labels, masks, CFG, TOPO, use_psl=False)
        reduced = psl.train_psl(x, labels, masks, CFG, TOPO, use_psl=True, shat_weight=0.0, cls_weight=0.0)
        assert models.parameter_digest(plain.model) == models.parameter_digest(reduced.model)
        assert [r["seg_loss_S"] for r in plain.history] == [r["seg_loss_S"] for r in reduced.history]

    def test_shat_rebuilt_every_batch(self):
        x, labels, masks = toy_set()
        counters = psl.PSLCounters(shat_log=[])
        cfg = TrainConfig(**{**CFG.__dict__, "learning_rate": 0.0})
        psl.train_psl(x, labels, masks, cfg, TOPO, counters=counters)
        assert counters.shat_builds == 3 * 2
        per_epoch = {}
        for epoch, idx, s_hat in counters.shat_log:
            for i, m in zip(idx, s_hat):
                per_epoch.setdefault(int(i), []).append(m)
        for maps in per_epoch.values():
            assert len(maps) == 3
            for m in maps[1:]:
                np.testing.assert_array_equal(m, maps[0])

    def test_shat_changes_after_updates(self):
        x, labels, masks = squares()
        counters = psl.PSLCounters(shat_log=[])
        cfg = TrainConfig(epochs=20, batch_size=2, learning_rate=0.1, seed=0)
        psl.train_psl(x, labels, masks, cfg, TOPO, counters=counters)
        assert counters.shat_builds == 20 * 4
        first = {int(i): m for e, idx, s in counters.shat_log if e == 0 for i, m in zip(idx, s)}
        last = {int(i): m for e, idx, s in counters.shat_log if e == 19 for i, m in zip(idx, s)}
        assert any(not np.array_equal(first[i], last[i]) for i in first)

    def test_history_log(self, tmp_path):
        x, labels, masks = toy_set()
        gt = np.where(masks == IGNORE, 0, masks)
        res = psl.train_psl(x, labels, masks, CFG, TOPO, val=(x[:2], gt[:2]), log_path=tmp_path / "m.jsonl")
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == 3
        row = res.history[0]
        assert set(row) == {"epoch", "cls_loss", "seg_loss_S", "seg_loss_Shat", "val_mIoU"}
        assert 0.0 <= row["val_mIoU"] <= 1.0

    def test_fits_masks(self):
        x, labels, masks = toy_set(4)
        cfg = TrainConfig(epochs=30, batch_size=4, learning_rate=0.3, seed=0)
        res = psl.train_psl(x, labels, masks, cfg, TOPO, use_psl=False)
        assert res.history[-1]["seg_loss_S"] < res.history[0]["seg_loss_S"]

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_names_batch(self):
        x, labels, masks = toy_set()
        cfg = TrainConfig(**{**CFG.__dict__, "learning_rate": 1e300, "momentum": 0.0})
        with pytest.raises(models.DivergenceError, match="batch"):
            psl.train_psl(x, labels, masks, cfg, TOPO)

    def test_mask_shape_checked(self):
        x, labels, masks = toy_set()
        with pytest.raises(ValueError):
            psl.train_psl(x, labels, masks[:, :8], CFG, TOPO)


class TestPlusPlus:
    def test_one_round_uses_own_predictions(self):
        x, labels, masks = toy_set()
        base = psl.train_psl(x, labels, masks, CFG, TOPO)
        pp = psl.psl_plus_plus(base.model, x, labels, CFG)
        own = psl.prohibitive_inference(base.model, x, CFG.prohibit_p)
        assert IGNORE not in own
        direct = psl.train_psl(x, labels, own, CFG, TOPO)
        assert models.parameter_digest(pp.model) == models.parameter_digest(direct.model)

    def test_more_rounds_need_opt_in(self):
        x, labels, masks = toy_set()
        base = psl.train_psl(x, labels, masks, CFG, TOPO)
        with pytest.raises(ValueError):
            psl.psl_plus_plus(base.model, x, labels, CFG, rounds=2)
        psl.psl_plus_plus(base.model, x, labels, CFG, rounds=2, allow_more_rounds=True)

    def test_self_distillation_keeps_quality(self):
        x, labels, gt = squares()
        cfg = TrainConfig(epochs=60, batch_size=2, learning_rate=0.1, seed=0)
        base = psl.train_psl(x, labels, gt, cfg, TOPO)
        def score(model):
            pred = psl.prohibitive_inference(model, x, cfg.prohibit_p)
            return metrics.miou(metrics.evaluate(pred, gt, 4))[1]

        assert score(base.model) == 1.0
        pp = psl.psl_plus_plus(base.model, x, labels, cfg)
        assert score(pp.model) >= score(base.model) - 0.01
