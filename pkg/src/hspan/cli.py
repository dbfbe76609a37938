"""Command-line entry point: ``hspan <subcommand> [--config cfg.json] [--stage-override k=v ...]``.

Exit status is 0 on success and the error class's ``exit_code`` otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline
from .datamodel import read_cube, write_cube
from .errors import HSPanError
from .metrics import evaluate as evaluate_pair
from .toy import toy_scene

log = logging.getLogger("hspan")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--stage-override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. dip.iterations=300 (repeatable)")
    p.add_argument("--output-root", help="shorthand for --stage-override output_root=...")
    p.add_argument("--force", action="store_true", help="rerun even if a record with another config exists")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hspan", description="Hyperspectral pansharpening experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="degrade a scene into LR/PAN/reference samples plus a manifest")
    _common(p)
    p.add_argument("--scene", help="scene CubeContainer directory (default: bundled toy scene)")
    p.add_argument("--beta", type=int)
    p.add_argument("--kernel-size", type=int)
    p.add_argument("--sigma", type=float, help="override sigma = 0.4247 * beta")
    p.add_argument("--pan-bands", type=int, help="K: PAN is the mean of the first K bands")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--train-ratio", type=float)
    p.add_argument("--train-count", type=int)

    p = sub.add_parser("upsample", help="DIP or baseline upsampling of every sample")
    _common(p)
    p.add_argument("--lam", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=["dip-qss", "dip-spectral", "nearest", "bicubic"])

    p = sub.add_parser("train", help="train HyperKite on the training split")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("fuse", help="predict residuals for the test split and fuse")
    _common(p)
    p.add_argument("--tile", type=int, help="spatial tile size for inference (overlap-and-crop)")
    p.add_argument("--bypass", action="store_true", help="identity check: x_dip := reference, zero residual")

    p = sub.add_parser("evaluate", help="metrics of fused test cubes, or of one cube pair")
    _common(p)
    p.add_argument("--pair", nargs=2, metavar=("FUSED", "REFERENCE"), help="evaluate two containers directly")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--ergas-as-printed", action="store_true")
    p.add_argument("--per-band", action="store_true")

    p = sub.add_parser("sweep", help="DIP lambda sweep on the test split")
    _common(p)
    p.add_argument("--lambdas", type=float, nargs="+")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("report", help="figures and summary tables")
    _common(p)
    p.add_argument("--rgb-bands", type=int, nargs=3, metavar=("B", "G", "R"))

    p = sub.add_parser("run", help="run every stage in order")
    _common(p)

    p = sub.add_parser("toygen", help="write the bundled synthetic scene as a CubeContainer")
    p.add_argument("out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args) -> List[str]:
    """Translate per-subcommand flags into config overrides; explicit overrides win."""
    flag_map = {
        "scene": "scene",
        "beta": "degrade.beta",
        "kernel_size": "degrade.kernel_size",
        "sigma": "degrade.sigma_override",
        "pan_bands": "degrade.pan_band_count",
        "patch_size": "patch_size",
        "split_seed": "split.seed",
        "train_ratio": "split.train_ratio",
        "train_count": "split.train_count",
        "lam": "dip.lam",
        "method": "method",
        "epochs": "hyperkite.epochs",
        "tile": "fuse.tile",
        "lambdas": "lambda_sweep",
        "rgb_bands": "rgb_bands",
        "output_root": "output_root",
    }
    out = []
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None and not (args.command == "evaluate" and attr == "beta"):
            out.append(f"{key}={json.dumps(value)}")
    if getattr(args, "iterations", None) is not None:
        out.append(f"dip.iterations={args.iterations}")
    if getattr(args, "seed", None) is not None:
        key = "hyperkite.seed" if args.command == "train" else "dip.seed"
        out.append(f"{key}={args.seed}")
    if getattr(args, "bypass", False):
        out.append("fuse.bypass=true")
    if getattr(args, "ergas_as_printed", False):
        out.append("evaluate.ergas_as_printed=true")
    if getattr(args, "per_band", False):
        out.append("evaluate.per_band=true")
    return out + list(args.stage_override)


def _config(args) -> pipeline.ExperimentConfig:
    config = pipeline.load_config(args.config) if args.config else pipeline.ExperimentConfig()
    return pipeline.apply_overrides(config, _overrides(args))


def _evaluate_pair(args) -> int:
    fused, ref = read_cube(args.pair[0]), read_cube(args.pair[1])
    report = evaluate_pair(fused.data, ref.data, args.beta or 1, per_band=args.per_band,
                           ergas_as_printed=args.ergas_as_printed)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "toygen":
            scene = toy_scene(args.seed, args.rows, args.cols)
            write_cube(scene, args.out, "toy")
            print(args.out)
            return 0
        if args.command == "evaluate" and args.pair:
            return _evaluate_pair(args)
        config = _config(args)
        if args.command == "run":
            records = pipeline.run_pipeline(config, force=args.force)
        else:
            if args.command == "prepare":
                pipeline.write_config(config)
            records = {args.command: pipeline.run_stage(config, args.command, force=args.force)}
        for stage, rec in records.items():
            print(f"{stage}: {json.dumps(rec['summary'], sort_keys=True)}")
        return 0
    except HSPanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
