"""Adversarial erasing: train, mine CAM regions, erase, repeat.

Each step fits a fresh classifier (same initialisation every step) on the
current images, thresholds the CAM of every image-level label, and paints
the union of those regions with the mean pixel of the *original* training
images. Only pixels that were not erased before a step count as that
step's newly mined region; they are what the merged foreground ``F``
accumulates.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cam, netpbm
from .models import ClassifierModel, DivergenceError, Topology, TrainConfig, train_classifier

logger = logging.getLogger(__name__)


def mean_pixel(images: np.ndarray) -> np.ndarray:
    """Per-channel mean over an ``[N, H, W, 3]`` stack."""
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(-1, images.shape[-1]).mean(axis=0)


def erase_regions(image: np.ndarray, region: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Copy of ``image`` with ``region`` pixels set to ``fill`` on every channel."""
    out = np.array(image, dtype=np.float64, copy=True)
    region = np.asarray(region, bool)
    if region.shape != out.shape[:2]:
        raise ValueError(f"region shape {region.shape} does not match image {out.shape[:2]}")
    out[region] = np.asarray(fill, dtype=np.float64)
    return out


def check_convergence(loss_history, threshold: float) -> bool:
    """True when the mean of the last three epoch losses is at most ``threshold``."""
    if len(loss_history) == 0:
        raise ValueError("loss_history is empty")
    return float(np.mean(loss_history[-3:])) <= threshold


def converged_loss(loss_history) -> float:
    return float(np.mean(loss_history[-3:]))


class StageError(RuntimeError):
    """A pipeline stage failed; ``step`` names where."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass
class StepRecord:
    step: int
    loss_history: list[float]
    converged_loss: float
    regions: list[dict[int, np.ndarray]]   # newly mined pixels per image and class
    erased: np.ndarray                     # [N, H, W] union erased at this step
    merged: bool

    @property
    def mined_fraction(self) -> float:
        return float(self.erased.mean())

    def summary(self) -> dict:
        return {"step": self.step, "converged_loss": self.converged_loss,
                "mined_fraction": self.mined_fraction, "merged": self.merged,
                "loss_history": self.loss_history}


@dataclass
class AEState:
    """Everything the erasing loop produced.

    ``foreground[i][c]`` is the merged region of class ``c`` in image ``i``;
    ``steps`` holds one record per executed step, the diagnostic one
    included (with ``merged=False``).
    """

    mean_pixel: np.ndarray
    labels: list[tuple[int, ...]]
    foreground: list[dict[int, np.ndarray]]
    steps: list[StepRecord] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def steps_completed(self) -> int:
        return sum(r.merged for r in self.steps)

    @property
    def losses(self) -> list[float]:
        return [r.converged_loss for r in self.steps]

    def foreground_after(self, k: int) -> list[dict[int, np.ndarray]]:
        """Merged regions using only the first ``k`` merged steps."""
        merged = [r for r in self.steps if r.merged][:k]
        out = []
        for i, labels in enumerate(self.labels):
            regions = {}
            for c in labels:
                bits = np.zeros(self.foreground[i][c].shape, bool)
                for r in merged:
                    bits |= r.regions[i][c]
                regions[c] = bits
            out.append(regions)
        return out

    def mined_size(self, k: int) -> np.ndarray:
        """Per-image pixel count of the union of classes after ``k`` steps."""
        sizes = []
        for regions in self.foreground_after(k):
            union = None
            for bits in regions.values():
                union = bits.copy() if union is None else union | bits
            sizes.append(0 if union is None else int(union.sum()))
        return np.array(sizes)

    def erased_images(self, images: np.ndarray, t: int) -> np.ndarray:
        """Images as seen by the classifier of step ``t`` (1-based)."""
        out = np.array(images, dtype=np.float64, copy=True)
        for r in self.steps[:t - 1]:
            out[r.erased] = self.mean_pixel
        return out


def _mine(model: ClassifierModel, images: np.ndarray, labels, config: TrainConfig):
    heatmaps = cam.compute_cams(model, images, labels)
    regions = []
    for maps in heatmaps:
        regions.append({c: cam.extract_region(hm, config.delta, config.delta_mode).bits
                        for c, hm in maps.items()})
    return heatmaps, regions


def run_ae(images: np.ndarray, labels, config: TrainConfig, topology: Topology | None = None,
           diagnostic: bool = True, artifact_dir: str | Path | None = None,
           image_ids=None) -> AEState:
    """Run ``config.ae_steps`` erasing steps, plus one unmerged diagnostic step.

    With ``config.loss_converge_threshold`` set, a step whose classifier
    does not converge below it ends the loop without being merged.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected [N, H, W, 3] images, got shape {images.shape}")
    labels = [tuple(int(c) for c in ls) for ls in labels]
    if len(labels) != len(images):
        raise ValueError(f"{len(images)} images but {len(labels)} label sets")
    if topology is None:
        topology = Topology(image_size=images.shape[1:3])
    fill = mean_pixel(images)
    shape = images.shape[1:3]
    state = AEState(fill, labels, [{c: np.zeros(shape, bool) for c in ls} for ls in labels])
    current = images.copy()
    erased_so_far = np.zeros(images.shape[:3], bool)
    ids = list(image_ids) if image_ids is not None else [f"{i:05d}" for i in range(len(images))]
    total = config.ae_steps + (1 if diagnostic else 0)

    for step in range(1, total + 1):
        merge = step <= config.ae_steps
        t0 = time.perf_counter()
        try:
            model, history = train_classifier(current, labels, config, topology, input_stats=images)
        except DivergenceError as exc:
            raise StageError(f"AE step {step}: {exc}", step) from exc
        loss = converged_loss(history)
        if (merge and config.loss_converge_threshold is not None
                and not check_convergence(history, config.loss_converge_threshold)):
            logger.info("AE step %d loss %.4f above threshold %.4f, stopping", step, loss,
                        config.loss_converge_threshold)
            state.stopped_early = True
            state.steps.append(StepRecord(step, history, loss, [], np.zeros(images.shape[:3], bool), False))
            break
        heatmaps, regions = _mine(model, current, labels, config)
        union = np.zeros(images.shape[:3], bool)
        new_regions = []
        for i, per_class in enumerate(regions):
            fresh = {}
            for c, bits in per_class.items():
                union[i] |= bits
                fresh[c] = bits & ~erased_so_far[i]
                if merge:
                    state.foreground[i][c] |= fresh[c]
            new_regions.append(fresh)
        record = StepRecord(step, history, loss, new_regions, union, merge)
        state.steps.append(record)
        if artifact_dir is not None:
            _write_step(Path(artifact_dir), record, current, heatmaps, ids)
        erased_so_far |= union
        current[union] = fill
        logger.info("AE step %d loss %.4f mined %.3f (%.1fs)", step, loss, record.mined_fraction,
                    time.perf_counter() - t0)
    return state


def _write_step(root: Path, record: StepRecord, images: np.ndarray, heatmaps, ids) -> None:
    d = root / f"step_{record.step}"
    for sub in ("erased", "heatmaps", "regions"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    for i, image_id in enumerate(ids):
        netpbm.write_ppm(d / "erased" / f"{image_id}.ppm", images[i])
        for c, hm in heatmaps[i].items():
            netpbm.write_pgm(d / "heatmaps" / f"{image_id}_c{c}.pgm", hm.values)
            netpbm.write_pgm(d / "regions" / f"{image_id}_c{c}.pgm",
                             record.regions[i][c].astype(np.uint8) * 255)
    summary = record.summary()
    (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
