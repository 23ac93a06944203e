"""Class activation maps and threshold-based region extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import ClassifierModel, to_chw


@dataclass
class Heatmap:
    values: np.ndarray      # H x W in [0, 1]
    raw_values: np.ndarray  # feature-resolution CAM before clamping/upsampling
    class_id: int
    image_id: str | None = None


@dataclass
class RegionMask:
    bits: np.ndarray  # H x W bool
    class_id: int


def raw_cam(features: np.ndarray, fc_weights: np.ndarray, class_id: int) -> np.ndarray:
    """``sum_k w[c, k] * feature_k(u)`` for ``[K, h, w]`` (or batched) features."""
    w = fc_weights[class_id]
    return np.tensordot(w, features, axes=([0], [-3]))


def normalize_cam(raw: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Clamp negatives, upsample to ``out_h x out_w``, min-max to ``[0, 1]``.

    A constant map normalises to all zeros.
    """
    clamped = np.maximum(raw, 0.0)
    up = T.bilinear_upsample(T.Tensor(clamped[None]), out_h, out_w).data[0]
    lo, hi = up.min(), up.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(up)
    return (up - lo) / (hi - lo)


def feature_maps(model: ClassifierModel, images: np.ndarray) -> np.ndarray:
    """Trunk output ``[N, K, h, w]`` for ``[N, H, W, 3]`` images."""
    return model.features(T.Tensor(to_chw(images))).data


def compute_cam(model: ClassifierModel, image: np.ndarray, class_id: int,
                image_id: str | None = None) -> Heatmap:
    """Heatmap of ``class_id`` on one ``H x W x 3`` image."""
    if not 0 <= class_id < model.num_classes:
        raise ValueError(f"class_id {class_id} outside 0..{model.num_classes - 1}")
    feats = feature_maps(model, image[None])[0]
    raw = raw_cam(feats, model.fc_weights.data, class_id)
    h, w = image.shape[:2]
    return Heatmap(normalize_cam(raw, h, w), raw, class_id, image_id)


def compute_cams(model: ClassifierModel, images: np.ndarray, labels, batch_size: int = 64):
    """Heatmaps for every (image, label) pair, batched through the trunk.

    Returns one ``{class_id: Heatmap}`` dict per image.
    """
    h, w = images.shape[1:3]
    out = []
    for start in range(0, len(images), batch_size):
        feats = feature_maps(model, images[start:start + batch_size])
        for f, ls in zip(feats, labels[start:start + batch_size]):
            maps = {}
            for c in ls:
                raw = raw_cam(f, model.fc_weights.data, int(c))
                maps[int(c)] = Heatmap(normalize_cam(raw, h, w), raw, int(c))
            out.append(maps)
    return out


def extract_region(heatmap: Heatmap, delta: float, mode: str = "fraction_of_max") -> RegionMask:
    """Pixels whose heat is at least ``delta * max``.

    With ``mode="quantile"`` the top ``delta`` fraction of pixels by value is
    taken instead (ties at the cut included). A zero map yields no pixels.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    v = heatmap.values
    top = v.max()
    if top <= 0.0:
        return RegionMask(np.zeros(v.shape, bool), heatmap.class_id)
    if mode == "fraction_of_max":
        bits = v >= delta * top
    elif mode == "quantile":
        k = max(1, int(np.ceil(delta * v.size)))
        cut = np.partition(v.ravel(), v.size - k)[v.size - k]
        bits = (v >= cut) & (v > 0.0)
    else:
        raise ValueError(f"unknown delta mode {mode!r}")
    return RegionMask(bits, heatmap.class_id)
