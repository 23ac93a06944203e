"""Synthetic multi-object scenes with image-level labels.

Every object is a composite: a *body* in a colour shared by all classes,
carrying only a faint tint, and a small saturated *marker*
whose colour is unique to the class. The tint is stronger on the marker's
half of the body than on the far half; the far-half tint
is shared by pairs of classes (0 with 1, 2 with 3, ...). A classifier latches onto the
markers first, so each round of erasing uncovers a weaker cue.

On disk a dataset is a directory::

    manifest.json          schema version, scene spec, one record per image
    images/<id>.ppm        P6, 8 bit
    gt/<id>.pgm            P5, hidden pixel labels 0..C (eval only)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm

MANIFEST_VERSION = 1

MARKER_COLORS = np.array([
    [0.95, 0.10, 0.10],
    [0.10, 0.85, 0.15],
    [0.15, 0.20, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.15, 0.90],
    [0.10, 0.90, 0.90],
    [0.98, 0.55, 0.05],
    [0.55, 0.10, 0.95],
])
SHAPES = ("disk", "square", "triangle", "diamond", "cross", "ring", "hbar", "vbar")
BODY_COLOR = np.array([0.78, 0.72, 0.62])
BACKGROUND_COLOR = np.array([0.36, 0.40, 0.46])


@dataclass
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)
    n_classes: int = 5
    n_train: int = 400
    n_val: int = 100
    min_objects: int = 1
    max_objects: int = 3
    body_size: tuple[int, int] = (20, 26)
    marker_size: int = 6
    low_contrast_classes: tuple[int, ...] = (4,)
    low_contrast_offset: float = 0.05
    head_tint: float = 0.06
    tail_tint: float = 0.035
    shared_tails: bool = True
    gradient_amplitude: float = 0.02
    noise_std: float = 0.01
    border_margin: int = 4
    seed: int = 42

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.body_size = tuple(self.body_size)
        self.low_contrast_classes = tuple(self.low_contrast_classes)
        if not 1 <= self.n_classes <= len(SHAPES):
            raise ValueError(f"n_classes must lie in 1..{len(SHAPES)}")
        if not 1 <= self.min_objects <= self.max_objects <= self.n_classes:
            raise ValueError("need 1 <= min_objects <= max_objects <= n_classes")
        h, w = self.image_size
        if self.body_size[1] + 2 * self.border_margin > min(h, w):
            raise ValueError("objects do not fit inside the border margin")


@dataclass
class Sample:
    id: str
    image: np.ndarray          # H x W x 3 in [0, 1]
    gt: np.ndarray             # H x W uint8 labels 0..C
    labels: tuple[int, ...]
    split: str
    boxes: list = field(default_factory=list)
    marker_mask: np.ndarray | None = None


@dataclass
class Dataset:
    """In-memory view of a generated or loaded dataset."""

    spec: SceneSpec
    samples: list[Sample]

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def arrays(self, name: str) -> tuple[np.ndarray, list[tuple[int, ...]], np.ndarray]:
        part = self.split(name)
        return (np.stack([s.image for s in part]), [s.labels for s in part],
                np.stack([s.gt for s in part]))


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    dy, dx = yy - c, xx - c
    r = size / 2.0
    if shape == "disk":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "square":
        return np.ones((size, size), bool)
    if shape == "triangle":
        return (yy >= 0) & (np.abs(dx) <= yy / 2.0)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "cross":
        return (np.abs(dx) <= r / 3) | (np.abs(dy) <= r / 3)
    if shape == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.45 * r) ** 2)
    if shape == "hbar":
        return np.abs(dy) <= r / 2.2
    if shape == "vbar":
        return np.abs(dx) <= r / 2.2
    raise ValueError(shape)


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (np.cos(theta) * (xx / (w - 1) - 0.5) + np.sin(theta) * (yy / (h - 1) - 0.5))
    img = BACKGROUND_COLOR[None, None, :] + spec.gradient_amplitude * ramp[..., None]
    img = img + rng.normal(0.0, spec.noise_std, size=(h, w, 3))
    return img


def _place(spec: SceneSpec, rng: np.random.Generator, classes: list[int]):
    """Non-overlapping boxes for each class, or None after 100 tries."""
    h, w = spec.image_size
    m = spec.border_margin
    boxes = []
    for _ in range(100):
        boxes = []
        for _c in classes:
            size = int(rng.integers(spec.body_size[0], spec.body_size[1] + 1))
            y0 = int(rng.integers(m, h - m - size + 1))
            x0 = int(rng.integers(m, w - m - size + 1))
            boxes.append((y0, x0, size))
        if all(_separate(a, b) for i, a in enumerate(boxes) for b in boxes[i + 1:]):
            return boxes
    return None


def _separate(a, b, gap: int = 2) -> bool:
    ay, ax, asz = a
    by, bx, bsz = b
    return (ay + asz + gap <= by or by + bsz + gap <= ay
            or ax + asz + gap <= bx or bx + bsz + gap <= ax)


def _hue(c: int) -> np.ndarray:
    """Unit-norm, zero-mean colour direction of class ``c``'s marker."""
    hue = MARKER_COLORS[c] - MARKER_COLORS[c].mean()
    return hue / np.linalg.norm(hue)


def render_sample(spec: SceneSpec, index: int, split: str) -> Sample:
    """Draw one scene from the substream keyed by ``(seed, index)``."""
    attempt = 0
    while True:
        rng = np.random.default_rng([spec.seed, index, attempt])
        n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        classes = sorted(int(c) for c in rng.choice(spec.n_classes, size=n_obj, replace=False))
        order = [int(c) for c in rng.permutation(classes)]
        boxes = _place(spec, rng, order)
        if boxes is not None:
            break
        attempt += 1

    img = _background(spec, rng)
    h, w = spec.image_size
    gt = np.zeros((h, w), np.uint8)
    markers = np.zeros((h, w), bool)
    records = []
    for c, (y0, x0, size) in zip(order, boxes):
        body = _shape_mask(SHAPES[c], size)
        region = img[y0:y0 + size, x0:x0 + size]
        low = c in spec.low_contrast_classes
        color = region[body].mean(axis=0) + spec.low_contrast_offset if low else BODY_COLOR

        # the marker sits near one corner; the half of the body on that side
        # carries the stronger tint
        ms = spec.marker_size
        corner = int(rng.integers(0, 4))
        sy = 1 if corner < 2 else -1
        sx = 1 if corner % 2 == 0 else -1
        ys, xs = np.nonzero(body)
        pick = int(np.argmin(sy * ys + sx * xs))
        lo, hi = ms // 2, size - ms + ms // 2
        cy = int(np.clip(ys[pick] + sy * (ms // 2), lo, hi))
        cx = int(np.clip(xs[pick] + sx * (ms // 2), lo, hi))
        yy, xx = np.mgrid[0:size, 0:size]
        centre = (size - 1) / 2.0
        near = sy * (yy - centre) + sx * (xx - centre) <= 0

        scale = 0.5 if low else 1.0
        head_hue = _hue(c)
        tail_hue = _hue(c - c % 2) if spec.shared_tails else head_hue
        hue = np.where(near[body][:, None], head_hue, tail_hue)
        amp = np.where(near, spec.head_tint, spec.tail_tint)[body] * scale
        region[body] = (color + amp[:, None] * hue
                        + rng.normal(0.0, spec.noise_std, size=(int(body.sum()), 3)))
        gt[y0:y0 + size, x0:x0 + size][body] = c + 1

        mk = np.zeros((size, size), bool)
        mk[cy - ms // 2:cy - ms // 2 + ms, cx - ms // 2:cx - ms // 2 + ms] = True
        mk &= body
        region[mk] = MARKER_COLORS[c]
        markers[y0:y0 + size, x0:x0 + size] |= mk
        records.append({"class": c, "box": [y0, x0, y0 + size, x0 + size],
                        "marker_pixels": int(mk.sum()), "body_pixels": int(body.sum())})

    img = np.clip(img, 0.0, 1.0)
    # round-trip through 8 bits so in-memory and on-disk datasets agree
    img = np.round(img * 255.0) / 255.0
    return Sample(id=f"{split}_{index:05d}", image=img, gt=gt, labels=tuple(classes),
                  split=split, boxes=records, marker_mask=markers)


def generate(spec: SceneSpec) -> Dataset:
    samples = [render_sample(spec, i, "train") for i in range(spec.n_train)]
    samples += [render_sample(spec, spec.n_train + i, "val") for i in range(spec.n_val)]
    return Dataset(spec, samples)


def _spec_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def write_dataset(dataset: Dataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    records = []
    for s in dataset.samples:
        netpbm.write_ppm(root / "images" / f"{s.id}.ppm", s.image)
        netpbm.write_pgm(root / "gt" / f"{s.id}.pgm", s.gt)
        records.append({"id": s.id, "labels": list(s.labels), "split": s.split, "objects": s.boxes})
    manifest = {"version": MANIFEST_VERSION, "spec": _spec_dict(dataset.spec), "images": records}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def generate_dataset(spec: SceneSpec, root: str | Path) -> Dataset:
    """Generate scenes and write them under ``root``."""
    ds = generate(spec)
    write_dataset(ds, root)
    return ds


def load_dataset(root: str | Path, with_gt: bool = False) -> Dataset:
    """Read a dataset directory. Ground truth is only read when asked for."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{root}: unsupported manifest version {manifest.get('version')}")
    spec = SceneSpec(**manifest["spec"])
    h, w = spec.image_size
    samples = []
    for rec in manifest["images"]:
        img = netpbm.read_ppm(root / "images" / f"{rec['id']}.ppm")
        if with_gt:
            gt = netpbm.read_pgm(root / "gt" / f"{rec['id']}.pgm")
        else:
            gt = np.zeros((h, w), np.uint8)
        samples.append(Sample(id=rec["id"], image=img, gt=gt, labels=tuple(rec["labels"]),
                              split=rec["split"], boxes=rec.get("objects", [])))
    return Dataset(spec, samples)
