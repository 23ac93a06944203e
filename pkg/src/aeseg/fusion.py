"""Fuse mined foreground and saliency background into a supervision mask."""

from __future__ import annotations

from typing import Mapping

import numpy as np

IGNORE = 255


def fuse(foreground: Mapping[int, np.ndarray], background: np.ndarray,
         saliency: np.ndarray, bg_threshold: float) -> np.ndarray:
    """Label plane over ``{0..C, IGNORE}`` from class regions and background cues.

    ``foreground`` maps a 0-based class id to its boolean region; the mask
    stores it as ``class_id + 1``. Per pixel, in order of precedence:

    * claimed by two or more classes -> IGNORE
    * claimed by one class with saliency below ``bg_threshold`` -> IGNORE
    * claimed by one class -> that class
    * unclaimed and in the background cue -> 0
    * unclaimed otherwise -> IGNORE
    """
    background = np.asarray(background, bool)
    claims = np.zeros(background.shape, np.int32)
    owner = np.zeros(background.shape, np.int32)
    for c, region in foreground.items():
        region = np.asarray(region, bool)
        if region.shape != background.shape:
            raise ValueError(f"region for class {c} has shape {region.shape}, expected {background.shape}")
        claims += region
        owner = np.where(region, int(c) + 1, owner)
    out = np.full(background.shape, IGNORE, np.uint8)
    out[(claims == 0) & background] = 0
    single = claims == 1
    keep = single & (np.asarray(saliency) >= bg_threshold)
    out[keep] = owner[keep]
    return out


def coverage(mask: np.ndarray) -> float:
    """Fraction of pixels carrying a label (not IGNORE)."""
    mask = np.asarray(mask)
    return float((mask != IGNORE).mean())


def fuse_dataset(images, labels, foreground, low_contrast_classes=(),
                 bg_threshold: float = 0.12, low_threshold: float = 0.06) -> np.ndarray:
    """Supervision masks ``[N, H, W]`` for a whole image stack.

    Each image gets its saliency map and its own threshold: ``low_threshold``
    when it carries a low-contrast class, ``bg_threshold`` otherwise.
    """
    from . import saliency

    out = []
    for image, ls, regions in zip(images, labels, foreground):
        sal = saliency.compute_saliency(image)
        thr = saliency.image_threshold(ls, low_contrast_classes, bg_threshold, low_threshold)
        out.append(fuse(regions, saliency.background_cues(sal, thr), sal, thr))
    return np.stack(out)
