"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np

from .fusion import IGNORE


def check_images(X, name: str = "X") -> np.ndarray:
    """``[N, H, W, 3]`` float64 images with finite values in ``[0, 1]``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name} must have shape [N, H, W, 3], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


def check_label_sets(y, n_samples: int, n_classes: int) -> list[tuple[int, ...]]:
    """Label sets from either an ``[N, C]`` 0/1 matrix or a sequence of class-id collections."""
    if isinstance(y, np.ndarray) and y.ndim == 2:
        if y.shape != (n_samples, n_classes):
            raise ValueError(f"label matrix must have shape {(n_samples, n_classes)}, got {y.shape}")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("label matrix must be 0/1")
        sets = [tuple(int(c) for c in np.flatnonzero(row)) for row in y]
    else:
        sets = [tuple(sorted(int(c) for c in ls)) for ls in y]
        if len(sets) != n_samples:
            raise ValueError(f"{n_samples} samples but {len(sets)} label sets")
    for ls in sets:
        if any(not 0 <= c < n_classes for c in ls):
            raise ValueError(f"label set {ls} has classes outside 0..{n_classes - 1}")
    return sets


def check_masks(masks, shape: tuple[int, ...], n_labels: int, allow_ignore: bool = True) -> np.ndarray:
    """``uint8`` label planes over ``0..n_labels-1`` (plus IGNORE if allowed)."""
    masks = np.asarray(masks)
    if masks.shape != tuple(shape):
        raise ValueError(f"masks must have shape {tuple(shape)}, got {masks.shape}")
    if masks.dtype.kind not in "iu":
        raise ValueError(f"masks must be integer, got {masks.dtype}")
    bad = (masks >= n_labels) & ~((masks == IGNORE) & allow_ignore)
    if (masks < 0).any() or bad.any():
        raise ValueError(f"mask values must lie in 0..{n_labels - 1}" + (" or IGNORE" if allow_ignore else ""))
    return masks.astype(np.uint8)


def labels_from_masks(masks: np.ndarray, n_classes: int) -> list[tuple[int, ...]]:
    """Image label sets implied by the object labels present in each mask."""
    out = []
    for m in masks:
        present = np.unique(m)
        out.append(tuple(int(v) - 1 for v in present if 1 <= v <= n_classes))
    return out
