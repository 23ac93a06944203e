"""Prohibitive segmentation learning.

The segmentation network has a classification branch whose sigmoid
outputs ``v`` weight the per-pixel class scores. Prepending a weight of 1
for background gives ``[1, v]``; the weighted argmax is the auxiliary mask
``S_hat``, rebuilt from the current batch at every update. Training
minimises the squared label loss plus the cross-entropy against both the
fused mask ``S`` and ``S_hat``. At test time confidences below ``p`` are
zeroed before the same weighted argmax.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from . import tensor as T
from .fusion import IGNORE
from .models import (DivergenceError, SegModel, SGD, Topology, TrainConfig, batch_order,
                     init_model, label_indicator, squared_label_loss, to_chw)
from .tensor import Tensor

logger = logging.getLogger(__name__)


def augmented_weights(v: np.ndarray) -> np.ndarray:
    """``[1, v]`` along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    return np.concatenate([np.ones(v.shape[:-1] + (1,)), v], axis=-1)


def weighted_argmax(scores: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of ``weights[c] * scores[c]``; ties go to the lower index.

    ``scores`` is ``[K, H, W]`` with ``weights`` ``[K]``, or the batched
    ``[N, K, H, W]`` with ``[N, K]``.
    """
    scores = np.asarray(scores)
    weights = np.asarray(weights, dtype=np.float64)
    if scores.ndim == 3:
        return weighted_argmax(scores[None], weights[None])[0]
    if weights.shape != scores.shape[:2]:
        raise ValueError(f"weights {weights.shape} do not match scores {scores.shape}")
    return np.argmax(scores * weights[:, :, None, None], axis=1).astype(np.uint8)


def weighted_auxiliary_mask(scores: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``S_hat``: the ``[1, v]``-weighted argmax of the score maps."""
    return weighted_argmax(scores, augmented_weights(v))


def prohibit(v: np.ndarray, p: float) -> np.ndarray:
    """Zero the confidences below ``p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"p must lie in [0, 1), got {p}")
    v = np.asarray(v, dtype=np.float64)
    return np.where(v < p, 0.0, v)


@dataclass
class PSLCounters:
    """Instrumentation: how often ``S_hat`` was built and masks came up empty.

    Set ``shat_log`` to a list to also record ``(epoch, batch indices,
    S_hat)`` for every build.
    """

    shat_builds: int = 0
    empty_masks: int = 0
    shat_log: list | None = None


def psl_loss(scores: Tensor, S: np.ndarray, S_hat: np.ndarray | None, shat_weight: float = 1.0,
             counters: PSLCounters | None = None) -> Tensor:
    """``J(S) + shat_weight * J(S_hat)``.

    Each ``J`` is the mean negative log score over the labelled pixels of its
    own mask. A mask with nothing labelled contributes 0 and bumps
    ``counters.empty_masks``.
    """
    terms = []
    for mask, w in ((S, 1.0), (S_hat, shat_weight)):
        if mask is None or w == 0.0:
            continue
        if not (np.asarray(mask) != IGNORE).any() and counters is not None:
            counters.empty_masks += 1
        j = T.masked_nll(scores, mask)
        terms.append(j if w == 1.0 else T.mul(j, w))
    if not terms:
        return T.mul(T.sum(scores), 0.0)
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


@dataclass
class PSLResult:
    model: SegModel
    history: list[dict] = field(default_factory=list)
    counters: PSLCounters = field(default_factory=PSLCounters)


def predict_scores(model: SegModel, images: np.ndarray, batch_size: int = 32):
    """Classification confidences ``[N, C]`` and score maps ``[N, C+1, H, W]``."""
    x = to_chw(images)
    vs, ss = [], []
    for start in range(0, len(x), batch_size):
        logits, scores = model.forward(Tensor(x[start:start + batch_size]))
        vs.append(T._sigmoid(logits.data))
        ss.append(scores.data)
    return np.concatenate(vs), np.concatenate(ss)


def prohibitive_inference(model: SegModel, images: np.ndarray, p: float,
                          override_v: np.ndarray | None = None, batch_size: int = 32) -> np.ndarray:
    """Label planes for ``[N, H, W, 3]`` images (or one ``H x W x 3`` image).

    ``override_v`` replaces the classification branch's confidences, e.g.
    with 0/1 ground-truth image labels.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
        if override_v is not None:
            override_v = np.asarray(override_v)[None]
    v, scores = predict_scores(model, images, batch_size)
    if override_v is not None:
        override_v = np.asarray(override_v, dtype=np.float64)
        if override_v.shape != v.shape:
            raise ValueError(f"override_v shape {override_v.shape} does not match {v.shape}")
        v = override_v
    pred = weighted_argmax(scores, augmented_weights(prohibit(v, p)))
    return pred[0] if single else pred


def plain_inference(model: SegModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Unweighted per-pixel argmax."""
    _, scores = predict_scores(model, np.asarray(images, dtype=np.float64), batch_size)
    return np.argmax(scores, axis=1).astype(np.uint8)


def train_psl(images: np.ndarray, labels, masks: np.ndarray, config: TrainConfig,
              topology: Topology | None = None, use_psl: bool = True, shat_weight: float = 1.0,
              val: tuple[np.ndarray, np.ndarray] | None = None,
              log_path: str | Path | None = None, cls_weight: float = 1.0,
              counters: PSLCounters | None = None) -> PSLResult:
    """Train a segmentation network on fused masks.

    With ``use_psl`` the objective is ``cls_weight`` * squared label loss +
    ``J(S)`` + ``shat_weight * J(S_hat)``, ``S_hat`` rebuilt every batch
    from the batch's own forward pass. Without it only ``J(S)`` is
    minimised, which is plain supervised training on ``S``; so is
    ``use_psl`` with both weights at 0. ``val`` is an optional
    ``(images, gt)`` pair scored after every epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks)
    if masks.shape != images.shape[:3]:
        raise ValueError(f"masks {masks.shape} do not match images {images.shape[:3]}")
    if topology is None:
        topology = Topology(image_size=images.shape[1:3])
    x = to_chw(images)
    y = label_indicator(labels, topology.n_classes)
    model = init_model(topology, config.seed, "segmentation")
    model.set_input_stats(images)
    opt = SGD(model.parameters(), config.learning_rate, config.momentum)
    rng = np.random.default_rng([config.seed, 2])
    result = PSLResult(model, counters=counters if counters is not None else PSLCounters())
    log = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(config.epochs):
            opt.lr = config.lr_at(epoch)
            sums = np.zeros(3)
            for b, idx in enumerate(batch_order(len(x), config.batch_size, rng)):
                model.zero_grad()
                try:
                    logits, scores = model.forward(Tensor(x[idx]))
                    seg_s = psl_loss(scores, masks[idx], None, counters=result.counters)
                    loss = seg_s
                    if use_psl:
                        v = T._sigmoid(logits.data)
                        s_hat = weighted_auxiliary_mask(scores.data, v)
                        result.counters.shat_builds += 1
                        if result.counters.shat_log is not None:
                            result.counters.shat_log.append((epoch, idx.copy(), s_hat))
                        seg_h = psl_loss(scores, s_hat, None, counters=result.counters)
                        cls = squared_label_loss(logits, y[idx])
                        # zero-weight terms stay out of the graph entirely
                        if shat_weight != 0.0:
                            loss = T.add(loss, seg_h if shat_weight == 1.0 else T.mul(seg_h, shat_weight))
                        if cls_weight != 0.0:
                            loss = T.add(loss, cls if cls_weight == 1.0 else T.mul(cls, cls_weight))
                        sums += np.array([cls.item(), seg_s.item(), seg_h.item()]) * len(idx)
                    else:
                        sums[1] += seg_s.item() * len(idx)
                    if not np.isfinite(loss.item()):
                        raise T.NonFiniteError("non-finite loss")
                    loss.backward()
                except T.NonFiniteError as exc:
                    raise DivergenceError(f"segmentation loss diverged in epoch {epoch}, batch {b}: {exc}") from exc
                opt.step()
            cls_l, seg_l, shat_l = sums / len(x)
            row = {"epoch": epoch, "cls_loss": cls_l if use_psl else None, "seg_loss_S": seg_l,
                   "seg_loss_Shat": shat_l if use_psl else None, "val_mIoU": None}
            if val is not None:
                pred = (prohibitive_inference(model, val[0], config.prohibit_p) if use_psl
                        else plain_inference(model, val[0]))
                row["val_mIoU"] = metrics.miou(metrics.evaluate(pred, val[1], topology.n_classes + 1))[1]
            result.history.append(row)
            logger.debug("seg epoch %d %s", epoch, row)
            if log is not None:
                log.write(json.dumps(row, sort_keys=True) + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()
    return result


def psl_plus_plus(model: SegModel, images: np.ndarray, labels, config: TrainConfig,
                  topology: Topology | None = None, rounds: int = 1, allow_more_rounds: bool = False,
                  **kwargs) -> PSLResult:
    """Retrain from scratch on the model's own prohibitive predictions.

    One round by default; more need ``allow_more_rounds``.
    """
    if rounds != 1 and not allow_more_rounds:
        raise ValueError("PSL++ runs exactly one round unless allow_more_rounds is set")
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    topology = topology or model.topology
    result = None
    for _ in range(rounds):
        masks = prohibitive_inference(model, images, config.prohibit_p)
        result = train_psl(images, labels, masks, config, topology, use_psl=True, **kwargs)
        model = result.model
    return result
