"""Border-contrast saliency and background cues.

Saliency of a pixel is its colour distance to the mean colour of the image
border ring (5% of the shorter side, at least one pixel), smoothed with a
3x3 box filter and min-max normalised.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter


def border_ring(h: int, w: int) -> np.ndarray:
    width = max(1, int(round(0.05 * min(h, w))))
    ring = np.zeros((h, w), bool)
    ring[:width] = ring[-width:] = True
    ring[:, :width] = ring[:, -width:] = True
    return ring


def compute_saliency(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h < 8 or w < 8:
        raise ValueError(f"saliency needs at least 8x8 pixels, got {h}x{w}")
    ref = image[border_ring(h, w)].mean(axis=0)
    dist = np.sqrt(((image - ref) ** 2).sum(axis=-1))
    smooth = uniform_filter(dist, size=3, mode="nearest")
    lo, hi = smooth.min(), smooth.max()
    if hi - lo <= 1e-12:
        return np.zeros((h, w))
    return (smooth - lo) / (hi - lo)


def background_cues(saliency: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels with saliency strictly below ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(saliency) < threshold


def image_threshold(labels, low_contrast_classes, default: float = 0.12, low: float = 0.06) -> float:
    """Background threshold for an image: ``low`` if any label is a low-contrast class."""
    return low if any(int(c) in set(low_contrast_classes) for c in labels) else default
