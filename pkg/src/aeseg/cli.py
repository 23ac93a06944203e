"""Command line front end: ``aeseg <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 a failed
``eval --assert`` check. ``$AESEG_ARTIFACT_ROOT`` prefixes the output
directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import load
from .models import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_ASSERT = 0, 2, 3, 4

SUBCOMMANDS = ("gen-data", "train-ae", "fuse", "train-psl", "infer", "eval", "pipeline")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--out", help="artifact directory (under $AESEG_ARTIFACT_ROOT if set)")
    common.add_argument("--steps", type=int, help="number of erasing steps K")
    common.add_argument("--delta", type=float, help="CAM threshold fraction")
    common.add_argument("--delta-mode", choices=("fraction_of_max", "quantile"))
    common.add_argument("--prohibit-p", type=float, help="confidence cut-off at inference")
    common.add_argument("--gt-weights", action="store_true", default=None,
                        help="weight scores by ground-truth image labels (upper-bound mode)")
    common.add_argument("--no-psl", action="store_true", default=None, help="train without PSL")
    common.add_argument("--pslpp", action="store_true", default=None, help="add the PSL++ round")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="aeseg", description="Adversarial erasing and prohibitive segmentation learning")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("train-ae", parents=[common], help="run adversarial erasing")
    sub.add_parser("fuse", parents=[common], help="build supervision masks from mined regions")
    sub.add_parser("train-psl", parents=[common], help="train the segmentation network")
    p = sub.add_parser("infer", parents=[common], help="predict val masks")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p = sub.add_parser("eval", parents=[common], help="score predictions and write the report")
    p.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit 4 unless the trend checks hold")
    p.add_argument("--min-miou", type=float, help="with --assert, also require this mIoU for every row")
    sub.add_parser("pipeline", parents=[common], help="run every stage")
    return parser


def overrides(args) -> dict:
    out = {"seed": args.seed, "out": args.out, "threads": args.threads, "ae.ae_steps": args.steps,
           "ae.delta": args.delta, "ae.delta_mode": args.delta_mode, "psl.prohibit_p": args.prohibit_p}
    if args.no_psl:
        out["enable_psl"] = False
    if args.pslpp:
        out["enable_pslpp"] = True
    if args.gt_weights:
        out["gt_weights"] = True
    return out


def _variant(cfg, args) -> str:
    if not cfg.enable_psl:
        return "plain"
    return "pslpp" if args.pslpp else "psl"


def _dispatch(args, cfg) -> int:
    cmd = args.command
    if cmd == "gen-data":
        print(pipeline.gen_data(cfg))
    elif cmd == "train-ae":
        state = pipeline.train_ae(cfg)
        print(json.dumps({"converged_loss": state.losses, "steps_completed": state.steps_completed}))
    elif cmd == "fuse":
        for k in range(1, cfg.ae.ae_steps + 1):
            masks = pipeline.fuse(cfg, k)
            print(f"K{k} coverage {(masks != 255).mean():.4f}")
    elif cmd == "train-psl":
        print(pipeline.train_psl(cfg, _variant(cfg, args)))
    elif cmd == "infer":
        gt = bool(args.gt_weights)
        variant = "psl" if gt else _variant(cfg, args)
        print(pipeline.infer(cfg, variant, gt_weights=gt, split=args.split))
    elif cmd == "eval":
        report = pipeline.evaluate(cfg)
        print(pipeline.format_report(report))
        if args.assert_:
            failed = pipeline.check_report(report, args.min_miou)
            for name in failed:
                print(f"assertion failed: {name}", file=sys.stderr)
            if failed:
                return EXIT_ASSERT
    elif cmd == "pipeline":
        report = pipeline.run_pipeline(cfg)
        print(pipeline.format_report(report))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load(args.config, overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(cfg.threads):
            return _dispatch(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageFailure as exc:
        record = {"stage": exc.stage, "error": exc.message}
        root = cfg.artifact_root()
        try:
            root.mkdir(parents=True, exist_ok=True)
            (root / "error.json").write_text(json.dumps(record, indent=1) + "\n")
        except OSError:
            pass
        print(json.dumps(record), file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
