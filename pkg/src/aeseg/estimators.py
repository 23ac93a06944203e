"""scikit-learn style wrappers around the training procedures.

``CAMClassifier`` is a multi-label image classifier with CAM access,
``AdversarialErasingMiner`` turns images plus image labels into fused
supervision masks, and ``PSLSegmenter`` learns a pixel labeller from those
masks. Hyperparameters are plain constructor arguments, so
``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

import hashlib

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import ae, cam, fusion, metrics, psl
from . import tensor as T
from .models import Topology, TrainConfig, label_indicator, to_chw, train_classifier
from .validation import check_images, check_label_sets, check_masks, labels_from_masks


class _TrainingParams:
    def _topology(self, image_size) -> Topology:
        return Topology(n_classes=self.n_classes, channels=tuple(self.channels),
                        strides=tuple(self.strides), image_size=tuple(image_size))

    def _train_config(self, **extra) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                           batch_size=self.batch_size, momentum=self.momentum,
                           seed=self.random_state, **extra)


class CAMClassifier(_TrainingParams, ClassifierMixin, BaseEstimator):
    """GAP + FC multi-label classifier trained on the squared label loss.

    ``y`` is an ``[N, n_classes]`` 0/1 matrix or a list of label sets;
    ``predict`` returns the 0/1 matrix.
    """

    def __init__(self, n_classes=5, channels=(16, 32), strides=(2, 1), learning_rate=0.1,
                 epochs=24, batch_size=4, momentum=0.9, random_state=0):
        self.n_classes = n_classes
        self.channels = channels
        self.strides = strides
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X, y, input_stats=None):
        X = check_images(X)
        labels = check_label_sets(y, len(X), self.n_classes)
        self.model_, self.loss_history_ = train_classifier(
            X, labels, self._train_config(), self._topology(X.shape[1:3]), input_stats)
        self.classes_ = np.arange(self.n_classes)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        return self.model_.logits(T.Tensor(to_chw(X))).data

    def predict_proba(self, X) -> np.ndarray:
        return T._sigmoid(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def score(self, X, y, sample_weight=None) -> float:
        y = label_indicator(check_label_sets(y, len(X), self.n_classes), self.n_classes)
        return super().score(X, y.astype(np.int64), sample_weight)

    def cams(self, X, y) -> list[dict[int, cam.Heatmap]]:
        """Normalised heatmaps for each image's labels."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        return cam.compute_cams(self.model_, X, check_label_sets(y, len(X), self.n_classes))


def _digest(X: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(X).tobytes()).hexdigest()


class AdversarialErasingMiner(_TrainingParams, TransformerMixin, BaseEstimator):
    """Mine object regions by adversarial erasing and fuse them with saliency cues.

    Mining is transductive: ``transform`` only accepts the images passed to
    ``fit``, and returns their ``[N, H, W]`` supervision masks (labels
    ``0..C`` plus 255 for ignored pixels).
    """

    def __init__(self, n_classes=5, steps=3, delta=0.2, delta_mode="fraction_of_max",
                 channels=(16, 32), strides=(2, 1), learning_rate=0.1, epochs=24, batch_size=4,
                 momentum=0.9, bg_threshold=0.12, low_threshold=0.06, low_contrast_classes=(),
                 loss_converge_threshold=None, diagnostic_step=True, random_state=0):
        self.n_classes = n_classes
        self.steps = steps
        self.delta = delta
        self.delta_mode = delta_mode
        self.channels = channels
        self.strides = strides
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.bg_threshold = bg_threshold
        self.low_threshold = low_threshold
        self.low_contrast_classes = low_contrast_classes
        self.loss_converge_threshold = loss_converge_threshold
        self.diagnostic_step = diagnostic_step
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        labels = check_label_sets(y, len(X), self.n_classes)
        config = self._train_config(delta=self.delta, delta_mode=self.delta_mode, ae_steps=self.steps,
                                    loss_converge_threshold=self.loss_converge_threshold)
        self.state_ = ae.run_ae(X, labels, config, self._topology(X.shape[1:3]),
                                diagnostic=self.diagnostic_step)
        self.masks_ = fusion.fuse_dataset(X, labels, self.state_.foreground, self.low_contrast_classes,
                                          self.bg_threshold, self.low_threshold)
        self.losses_ = self.state_.losses
        self.coverage_ = fusion.coverage(self.masks_)
        self._fit_digest = _digest(X)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "masks_")
        X = check_images(X)
        if _digest(X) != self._fit_digest:
            raise ValueError("AdversarialErasingMiner only transforms the images it was fitted on")
        return self.masks_.copy()

    def masks_for_steps(self, X, y, k: int) -> np.ndarray:
        """Masks built from the first ``k`` erasing steps only."""
        check_is_fitted(self, "state_")
        X = check_images(X)
        labels = check_label_sets(y, len(X), self.n_classes)
        return fusion.fuse_dataset(X, labels, self.state_.foreground_after(k), self.low_contrast_classes,
                                   self.bg_threshold, self.low_threshold)


class PSLSegmenter(_TrainingParams, BaseEstimator):
    """Two-branch segmentation network trained with (or without) PSL.

    ``fit(X, masks, labels=None)``: image labels default to the classes
    present in each mask. ``predict`` uses prohibitive inference with
    ``prohibit_p`` (plain argmax when ``use_psl`` is off); passing
    ``labels`` to ``predict`` substitutes them for the classification
    confidences. ``score`` is mean IoU against ground-truth label planes.
    """

    def __init__(self, n_classes=5, use_psl=True, prohibit_p=0.1, shat_weight=1.0, plus_plus=False,
                 channels=(16, 32), strides=(2, 1), learning_rate=0.1, epochs=12, batch_size=4,
                 momentum=0.9, random_state=0):
        self.n_classes = n_classes
        self.use_psl = use_psl
        self.prohibit_p = prohibit_p
        self.shat_weight = shat_weight
        self.plus_plus = plus_plus
        self.channels = channels
        self.strides = strides
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X, y, labels=None):
        X = check_images(X)
        masks = check_masks(y, X.shape[:3], self.n_classes + 1)
        labels = (labels_from_masks(masks, self.n_classes) if labels is None
                  else check_label_sets(labels, len(X), self.n_classes))
        config = self._train_config(prohibit_p=self.prohibit_p)
        topo = self._topology(X.shape[1:3])
        result = psl.train_psl(X, labels, masks, config, topo, use_psl=self.use_psl,
                               shat_weight=self.shat_weight)
        if self.plus_plus:
            if not self.use_psl:
                raise ValueError("plus_plus needs use_psl=True")
            result = psl.psl_plus_plus(result.model, X, labels, config, topo, shat_weight=self.shat_weight)
        self.model_ = result.model
        self.history_ = result.history
        self.counters_ = result.counters
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class scores ``[N, C+1, H, W]``."""
        check_is_fitted(self, "model_")
        return psl.predict_scores(self.model_, check_images(X))[1]

    def predict_confidence(self, X) -> np.ndarray:
        """Classification-branch confidences ``[N, C]``."""
        check_is_fitted(self, "model_")
        return psl.predict_scores(self.model_, check_images(X))[0]

    def predict(self, X, labels=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        if labels is not None:
            v = label_indicator(check_label_sets(labels, len(X), self.n_classes), self.n_classes)
            return psl.prohibitive_inference(self.model_, X, self.prohibit_p, override_v=v)
        if not self.use_psl:
            return psl.plain_inference(self.model_, X)
        return psl.prohibitive_inference(self.model_, X, self.prohibit_p)

    def score(self, X, y, labels=None) -> float:
        gt = check_masks(y, np.shape(X)[:3], self.n_classes + 1)
        pred = self.predict(X, labels)
        return metrics.miou(metrics.evaluate(pred, gt, self.n_classes + 1))[1]
