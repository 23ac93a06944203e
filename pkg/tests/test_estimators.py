"""Estimator wrappers and input validation."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from aeseg import models, validation
from aeseg.estimators import AdversarialErasingMiner, CAMClassifier, PSLSegmenter
from aeseg.fusion import IGNORE

SMALL = dict(n_classes=3, channels=(6, 8), strides=(2, 1), batch_size=4, random_state=3)


class TestValidation:
    @pytest.mark.parametrize("X", [np.zeros((2, 8, 8)), np.zeros((0, 8, 8, 3)), np.full((1, 8, 8, 3), 2.0),
                                   np.full((1, 8, 8, 3), np.nan)])
    def test_bad_images(self, X):
        with pytest.raises(ValueError):
            validation.check_images(X)

    def test_label_forms_agree(self):
        sets = validation.check_label_sets([[2, 0], [1]], 2, 3)
        matrix = validation.check_label_sets(np.array([[1, 0, 1], [0, 1, 0]]), 2, 3)
        assert sets == matrix == [(0, 2), (1,)]

    @pytest.mark.parametrize("y", [[(0,)], [(3,), (0,)], np.array([[1, 2, 0], [0, 0, 0]]), np.ones((2, 2))])
    def test_bad_labels(self, y):
        with pytest.raises(ValueError):
            validation.check_label_sets(y, 2, 3)

    def test_masks(self):
        ok = np.array([[[0, 3, IGNORE]]])
        assert validation.check_masks(ok, (1, 1, 3), 4).dtype == np.uint8
        with pytest.raises(ValueError):
            validation.check_masks(ok, (1, 1, 3), 4, allow_ignore=False)
        with pytest.raises(ValueError):
            validation.check_masks(np.array([[[4]]]), (1, 1, 1), 4)
        with pytest.raises(ValueError):
            validation.check_masks(ok.astype(float), (1, 1, 3), 4)

    def test_labels_from_masks(self):
        masks = np.array([[[0, 2, IGNORE]], [[0, 0, 0]]])
        assert validation.labels_from_masks(masks, 3) == [(1,), ()]


class TestParams:
    @pytest.mark.parametrize("cls", [CAMClassifier, AdversarialErasingMiner, PSLSegmenter])
    def test_clone_round_trip(self, cls):
        est = cls(n_classes=4, random_state=9)
        copy = clone(est)
        assert copy.get_params() == est.get_params()
        assert copy.set_params(random_state=1).random_state == 1

    @pytest.mark.parametrize("cls", [CAMClassifier, AdversarialErasingMiner, PSLSegmenter])
    def test_not_fitted(self, cls):
        with pytest.raises(NotFittedError):
            getattr(cls(), "predict" if cls is not AdversarialErasingMiner else "transform")(
                np.zeros((1, 32, 32, 3)))


class TestCAMClassifier:
    def test_fit_predict(self, small_arrays):
        x, y, _ = small_arrays
        clf = CAMClassifier(epochs=20, **SMALL).fit(x, y)
        assert clf.predict(x).shape == (len(x), 3)
        assert np.all((clf.predict_proba(x) > 0) & (clf.predict_proba(x) < 1))
        assert clf.score(x, y) >= 0.5
        maps = clf.cams(x[:2], y[:2])
        assert sorted(maps[0]) == list(y[0])

    def test_matches_conftest_classifier(self, small_arrays, small_classifier):
        x, y, _ = small_arrays
        clf = CAMClassifier(epochs=20, learning_rate=0.1, **SMALL).fit(x, y)
        assert models.parameter_digest(clf.model_) == models.parameter_digest(small_classifier)


@pytest.fixture(scope="module")
def miner(small_arrays):
    x, y, _ = small_arrays
    return AdversarialErasingMiner(steps=2, epochs=6, low_contrast_classes=(2,), **SMALL).fit(x, y)


class TestMinerAndSegmenter:
    def test_transform(self, miner, small_arrays):
        x, y, _ = small_arrays
        masks = miner.transform(x)
        assert masks.shape == x.shape[:3]
        assert set(np.unique(masks)) <= {0, 1, 2, 3, IGNORE}
        assert miner.coverage_ == pytest.approx((masks != IGNORE).mean())
        assert len(miner.losses_) == 3
        np.testing.assert_array_equal(miner.masks_for_steps(x, y, 2), masks)

    def test_transductive(self, miner, small_arrays):
        with pytest.raises(ValueError):
            miner.transform(small_arrays[0][:3])

    def test_segmenter(self, miner, small_arrays):
        x, y, gt = small_arrays
        seg = PSLSegmenter(epochs=2, **SMALL).fit(x, miner.transform(x), y)
        pred = seg.predict(x)
        assert pred.shape == x.shape[:3] and pred.max() <= 3
        assert seg.predict_proba(x[:2]).shape == (2, 4, 32, 32)
        assert seg.predict_confidence(x[:2]).shape == (2, 3)
        assert 0.0 <= seg.score(x, gt) <= 1.0
        gt_pred = seg.predict(x, labels=y)
        for p, ls in zip(gt_pred, y):
            assert set(np.unique(p)) <= {0} | {c + 1 for c in ls}
        assert seg.counters_.shat_builds == 2 * 6

    def test_plus_plus_requires_psl(self, small_arrays):
        x, y, gt = small_arrays
        with pytest.raises(ValueError):
            PSLSegmenter(epochs=1, use_psl=False, plus_plus=True, **SMALL).fit(x, gt, y)
