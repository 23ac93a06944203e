"""File-based pipeline stages.

Every stage reads its inputs from, and writes its outputs to, the artifact
root, so each can be rerun on its own::

    data/                      generated dataset (images, hidden gt, manifest)
    ae/step_<t>/               erased images, heatmaps, newly mined regions, summary.json
    ae/summary.json            converged loss per step
    masks/K<k>/<id>.pgm        fused supervision masks from the first k steps
    masks/legend.json          label and colour legend
    models/<variant>_K<k>.ckpt segmentation checkpoints (+ .metrics.jsonl)
    pred/<name>_K<k>/<id>.pgm  predicted val masks
    report.json, report.txt    evaluation and trend report (deterministic)
    run.json                   run manifest: config digest, versions, stage timings

Variants are ``plain`` (trained without PSL), ``psl`` and ``pslpp``;
prediction sets add ``gt`` (the psl model weighted by ground-truth image
labels).
"""

from __future__ import annotations

import json
import logging
import platform
import re
import time
from pathlib import Path

import numpy as np

from . import ae, fusion, metrics, netpbm, psl, synthdata
from .config import PipelineConfig, dumps
from .models import ConfigError, DivergenceError, label_indicator, load_checkpoint, save_checkpoint
from .synthdata import Dataset

logger = logging.getLogger(__name__)

VERSION = "0.1.0"
PALETTE = [[0, 0, 0], [230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25], [145, 30, 180],
           [70, 240, 240], [245, 130, 48], [240, 50, 230]]


class StageFailure(RuntimeError):
    """A stage could not complete; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path, stage: str):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise StageFailure(stage, f"missing input {path}; run the earlier stage first") from None


def _load(root: Path, stage: str, with_gt: bool = False) -> Dataset:
    if not (root / "data" / "manifest.json").exists():
        raise StageFailure(stage, f"no dataset under {root / 'data'}; run gen-data first")
    return synthdata.load_dataset(root / "data", with_gt=with_gt)


def _arrays(ds: Dataset, split: str):
    part = ds.split(split)
    return (np.stack([s.image for s in part]), [s.labels for s in part], [s.id for s in part])


# --------------------------------------------------------------------------
# stages


def gen_data(cfg: PipelineConfig) -> Path:
    root = cfg.artifact_root()
    synthdata.generate_dataset(cfg.data, root / "data")
    return root / "data"


def train_ae(cfg: PipelineConfig) -> ae.AEState:
    root = cfg.artifact_root()
    ds = _load(root, "train-ae")
    images, labels, ids = _arrays(ds, "train")
    out = root / "ae"
    try:
        state = ae.run_ae(images, labels, cfg.ae, cfg.topology(), diagnostic=cfg.diagnostic_step,
                          artifact_dir=out, image_ids=ids)
    except ae.StageError as exc:
        raise StageFailure("train-ae", str(exc)) from exc
    _write_json(out / "summary.json", {
        "steps": [r.summary() for r in state.steps],
        "steps_completed": state.steps_completed,
        "stopped_early": state.stopped_early,
        "mean_pixel": [float(v) for v in state.mean_pixel],
    })
    return state


def _merged_regions(root: Path, ids, labels, k: int, shape) -> list[dict[int, np.ndarray]]:
    summary = _read_json(root / "ae" / "summary.json", "fuse")
    merged_steps = [s["step"] for s in summary["steps"] if s["merged"]]
    if k > len(merged_steps):
        raise StageFailure("fuse", f"asked for {k} steps but only {len(merged_steps)} were mined")
    out = []
    for image_id, ls in zip(ids, labels):
        regions = {}
        for c in ls:
            bits = np.zeros(shape, bool)
            for t in merged_steps[:k]:
                path = root / "ae" / f"step_{t}" / "regions" / f"{image_id}_c{c}.pgm"
                if not path.exists():
                    raise StageFailure("fuse", f"missing region file {path}")
                bits |= netpbm.read_pgm(path) > 0
            regions[c] = bits
        out.append(regions)
    return out


def fuse(cfg: PipelineConfig, k: int | None = None) -> np.ndarray:
    """Write ``masks/K<k>/`` and return the masks."""
    root = cfg.artifact_root()
    k = cfg.ae.ae_steps if k is None else k
    ds = _load(root, "fuse")
    images, labels, ids = _arrays(ds, "train")
    regions = _merged_regions(root, ids, labels, k, images.shape[1:3])
    masks = fusion.fuse_dataset(images, labels, regions, cfg.data.low_contrast_classes,
                                cfg.ae.saliency_bg_threshold, cfg.ae.saliency_low_threshold)
    out = root / "masks" / f"K{k}"
    out.mkdir(parents=True, exist_ok=True)
    for image_id, m in zip(ids, masks):
        netpbm.write_pgm(out / f"{image_id}.pgm", m)
    _write_json(root / "masks" / "legend.json", {
        "labels": {"0": "background", **{str(c + 1): f"class_{c + 1}" for c in range(cfg.data.n_classes)},
                   str(fusion.IGNORE): "ignore"},
        "palette": {str(i): PALETTE[i % len(PALETTE)] for i in range(cfg.data.n_classes + 1)}
        | {str(fusion.IGNORE): [255, 255, 255]},
    })
    _write_json(out / "coverage.json", {"coverage": fusion.coverage(masks)})
    return masks


def _read_masks(root: Path, ids, k: int) -> np.ndarray:
    d = root / "masks" / f"K{k}"
    if not d.is_dir():
        raise StageFailure("train-psl", f"no fused masks in {d}; run fuse first")
    return np.stack([netpbm.read_pgm(d / f"{i}.pgm") for i in ids])


def train_psl(cfg: PipelineConfig, variant: str, k: int | None = None) -> Path:
    """Train ``plain``, ``psl`` or ``pslpp`` on ``masks/K<k>``; returns the checkpoint path."""
    if variant not in ("plain", "psl", "pslpp"):
        raise ConfigError(f"unknown variant {variant!r}")
    root = cfg.artifact_root()
    k = cfg.ae.ae_steps if k is None else k
    ds = _load(root, "train-psl")
    images, labels, ids = _arrays(ds, "train")
    masks = _read_masks(root, ids, k)
    models_dir = root / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    ckpt = models_dir / f"{variant}_K{k}.ckpt"
    log = models_dir / f"{variant}_K{k}.metrics.jsonl"
    try:
        if variant == "pslpp":
            base = models_dir / f"psl_K{k}.ckpt"
            if not base.exists():
                train_psl(cfg, "psl", k)
            result = psl.psl_plus_plus(load_checkpoint(base), images, labels, cfg.psl, cfg.topology(),
                                       shat_weight=cfg.shat_weight, log_path=log)
        else:
            result = psl.train_psl(images, labels, masks, cfg.psl, cfg.topology(),
                                   use_psl=variant == "psl", shat_weight=cfg.shat_weight, log_path=log)
    except DivergenceError as exc:
        raise StageFailure("train-psl", str(exc)) from exc
    save_checkpoint(result.model, ckpt)
    return ckpt


def infer(cfg: PipelineConfig, variant: str, k: int | None = None, gt_weights: bool = False,
          split: str = "val") -> Path:
    """Predict ``split`` with ``models/<variant>_K<k>.ckpt`` into ``pred/``."""
    root = cfg.artifact_root()
    k = cfg.ae.ae_steps if k is None else k
    ds = _load(root, "infer")
    images, labels, ids = _arrays(ds, split)
    ckpt = root / "models" / f"{variant}_K{k}.ckpt"
    if not ckpt.exists():
        raise StageFailure("infer", f"missing checkpoint {ckpt}; run train-psl first")
    model = load_checkpoint(ckpt)
    if gt_weights:
        pred = psl.prohibitive_inference(model, images, cfg.psl.prohibit_p,
                                         override_v=label_indicator(labels, cfg.data.n_classes))
        name = f"gt_K{k}"
    elif variant == "plain":
        pred = psl.plain_inference(model, images)
        name = f"plain_K{k}"
    else:
        pred = psl.prohibitive_inference(model, images, cfg.psl.prohibit_p)
        name = f"{variant}_K{k}"
    out = root / "pred" / name
    out.mkdir(parents=True, exist_ok=True)
    for image_id, m in zip(ids, pred):
        netpbm.write_pgm(out / f"{image_id}.pgm", m)
    return out


ROW_NAMES = {"plain": "without_psl", "psl": "psl", "pslpp": "pslpp", "gt": "gt_weighted"}


def evaluate(cfg: PipelineConfig, split: str = "val") -> dict:
    """Score every prediction set under ``pred/`` and write the report."""
    root = cfg.artifact_root()
    ds = _load(root, "eval", with_gt=True)
    part = ds.split(split)
    gts = {s.id: s.gt for s in part}
    n_labels = cfg.data.n_classes + 1
    k_max = cfg.ae.ae_steps
    report: dict = {"config_digest": cfg.digest(), "seed": cfg.seed, "split": split,
                    "ae": {}, "ae_steps": {}, "variants": {}}
    summary_path = root / "ae" / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        report["ae"]["converged_loss"] = [s["converged_loss"] for s in summary["steps"]]
        report["ae"]["steps_completed"] = summary["steps_completed"]
    coverage = {}
    for d in sorted((root / "masks").glob("K*")):
        if (d / "coverage.json").exists():
            coverage[d.name[1:]] = json.loads((d / "coverage.json").read_text())["coverage"]
    report["ae"]["coverage"] = coverage
    pred_root = root / "pred"
    dirs = sorted(pred_root.iterdir()) if pred_root.is_dir() else []
    if not dirs:
        raise StageFailure("eval", f"no predictions under {pred_root}; run infer first")
    for d in dirs:
        m = re.fullmatch(r"(plain|psl|pslpp|gt)_K(\d+)", d.name)
        if m is None:
            continue
        name, k = m.group(1), int(m.group(2))
        cm = metrics.ConfusionMatrix(n_labels)
        for image_id, gt in gts.items():
            path = d / f"{image_id}.pgm"
            if not path.exists():
                raise StageFailure("eval", f"missing prediction {path}")
            cm.accumulate(netpbm.read_pgm(path), gt)
        rep = metrics.report(cm)
        if name == ("psl" if cfg.enable_psl else "plain"):
            report["ae_steps"][str(k)] = rep["mean_iou"]
        if k == k_max:
            report["variants"][ROW_NAMES[name]] = rep
    order = list(ROW_NAMES.values())
    report["variants"] = dict(sorted(report["variants"].items(), key=lambda kv: order.index(kv[0])))
    _write_json(root / "report.json", report)
    (root / "report.txt").write_text(format_report(report))
    return report


def format_report(report: dict) -> str:
    lines = [f"seed {report['seed']}  config {report['config_digest']}  split {report['split']}", ""]
    if report["ae"].get("converged_loss"):
        lines.append("AE converged loss per step: "
                     + "  ".join(f"{v:.4f}" for v in report["ae"]["converged_loss"]))
    if report["ae"].get("coverage"):
        lines.append("fused-mask coverage per K:  "
                     + "  ".join(f"K{k}={v:.3f}" for k, v in sorted(report["ae"]["coverage"].items())))
    if report["ae_steps"]:
        lines.append("mIoU per K:                 "
                     + "  ".join(f"K{k}={100 * v:.2f}" for k, v in sorted(report["ae_steps"].items())))
    lines.append("")
    for name, rep in report["variants"].items():
        lines.append(f"[{name}]")
        lines.append(metrics.format_table(rep))
        lines.append("")
    return "\n".join(lines)


ASSERTIONS = (
    ("K-step gain >= 3 points", lambda r: _trend(r) is None or _trend(r) >= 0.03),
    ("PSL gain >= 1.5 points", lambda r: _gap(r, "psl", "without_psl", 0.015)),
    ("PSL++ >= PSL - 0.5 points", lambda r: _gap(r, "pslpp", "psl", -0.005)),
    ("GT weights >= PSL", lambda r: _gap(r, "gt_weighted", "psl", 0.0)),
)


def _trend(report):
    steps = report["ae_steps"]
    if len(steps) < 2:
        return None
    ks = sorted(int(k) for k in steps)
    return steps[str(ks[-1])] - steps[str(ks[0])]


def _gap(report, a, b, margin) -> bool:
    v = report["variants"]
    if a not in v or b not in v:
        return True
    return v[a]["mean_iou"] - v[b]["mean_iou"] >= margin - 1e-12


def check_report(report: dict, min_miou: float | None = None) -> list[str]:
    """Names of the failed assertions (checks whose rows are missing pass)."""
    failed = [name for name, check in ASSERTIONS if not check(report)]
    if min_miou is not None:
        for name, rep in report["variants"].items():
            if rep["mean_iou"] < min_miou:
                failed.append(f"{name} mIoU {rep['mean_iou']:.4f} < {min_miou}")
    return failed


def run_pipeline(cfg: PipelineConfig) -> dict:
    """All stages end to end; returns the report."""
    root = cfg.artifact_root()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(dumps(cfg))
    timings = {}

    def timed(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
        return out

    if not (root / "data" / "manifest.json").exists():
        timed("gen-data", gen_data, cfg)
    state = timed("train-ae", train_ae, cfg)
    k_max = min(cfg.ae.ae_steps, state.steps_completed)
    if k_max < 1:
        raise StageFailure("train-ae", "no erasing step converged")
    primary = "psl" if cfg.enable_psl else "plain"
    for k in range(1, k_max + 1):
        timed("fuse", fuse, cfg, k)
        timed("train-psl", train_psl, cfg, primary, k)
        timed("infer", infer, cfg, primary, k)
    if cfg.enable_psl:
        timed("train-psl", train_psl, cfg, "plain", k_max)
        timed("infer", infer, cfg, "plain", k_max)
        if cfg.gt_weights:
            timed("infer", infer, cfg, "psl", k_max, gt_weights=True)
        if cfg.enable_pslpp:
            timed("train-psl", train_psl, cfg, "pslpp", k_max)
            timed("infer", infer, cfg, "pslpp", k_max)
    if k_max != cfg.ae.ae_steps:
        cfg.ae.ae_steps = k_max
    report = timed("eval", evaluate, cfg)
    _write_json(root / "run.json", {
        "config_digest": cfg.digest(), "seed": cfg.seed, "version": VERSION,
        "python": platform.python_version(), "numpy": np.__version__,
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    })
    return report
