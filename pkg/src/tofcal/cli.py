"""``tofcal`` command line.

Exit codes: 0 ok, 2 configuration error, 3 missing input, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline
from .config import PipelineConfig, load, parse_pairs, window_from_bounds
from .errors import ConfigError, EmptyCalibration, FitDegenerate, FitDiverged

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

STAGES = ("simulate", "preprocess", "calibrate", "train", "evaluate", "explain", "report")

log = logging.getLogger("tofcal")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--threads", type=int, help="overrides run.threads")
    common.add_argument("--energy-window", metavar="LO,HI", help="energy window in keV (evaluate, explain)")
    common.add_argument("--out", metavar="DIR", help="output directory, overrides run.out")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a single configuration key")
    p = _Parser(prog="tofcal", description="Timing calibration pipeline for a coincidence detector pair.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate": "generate the measurement campaign",
        "preprocess": "positions, energies and noise filter",
        "calibrate": "analytical least-squares timing calibration",
        "train": "boosted residual model grid search",
        "evaluate": "CTR, MAE and linearity tables",
        "explain": "SHAP attributions of the best model",
        "report": "markdown summary of all stages",
    }
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=helps[name])
    sub.add_parser("config", parents=[common], help="print the effective configuration")
    return p


def _energy_window(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--energy-window expects LO,HI in keV, got {text!r}") from None
    return window_from_bounds(lo, hi)


def resolve_config(args) -> PipelineConfig:
    cfg = load(args.config) if args.config else PipelineConfig()
    pairs = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append(tuple(s.strip() for s in item.split("=", 1)))
    if args.seed is not None:
        pairs.append(("run.seed", str(args.seed)))
    if args.threads is not None:
        pairs.append(("run.threads", str(args.threads)))
    if args.out is not None:
        pairs.append(("run.out", args.out))
    cfg = parse_pairs(pairs, cfg)
    if cfg.threads < 1:
        raise ConfigError("run.threads must be >= 1")
    return cfg


def _set_threads(n: int) -> None:
    # all kernels are serial; more workers would only change nothing
    if n > 1:
        log.info("running single-threaded; --threads %d has no effect", n)


def run(args) -> int:
    from .config import dump

    cfg = resolve_config(args)
    window = _energy_window(args.energy_window) if args.energy_window else None
    _set_threads(cfg.threads)
    if args.command == "config":
        sys.stdout.write(dump(cfg))
        return EXIT_OK
    if args.command == "simulate":
        out = pipeline.stage_simulate(cfg)
    elif args.command == "preprocess":
        out = pipeline.stage_preprocess(cfg)
    elif args.command == "calibrate":
        out = pipeline.stage_calibrate(cfg)
    elif args.command == "train":
        out = pipeline.stage_train(cfg)
    elif args.command == "evaluate":
        out = pipeline.stage_evaluate(cfg, None if window is None else (window,))
    elif args.command == "explain":
        out = pipeline.stage_explain(cfg, window)
    else:
        sys.stdout.write(pipeline.stage_report(cfg))
        return EXIT_OK
    print(json.dumps({k: v for k, v in out.items() if k in ("format", "best", "ctr", "grid", "group_importance")
                      or k == "datasets"}, indent=1))
    return EXIT_OK


def main(argv=None) -> int:
    level = os.environ.get("TOFCAL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"tofcal: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingInput as exc:
        print(f"tofcal: missing input: {exc.path}", file=sys.stderr)
        return EXIT_MISSING
    except (FitDiverged, FitDegenerate, EmptyCalibration, FloatingPointError, ArithmeticError) as exc:
        print(f"tofcal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
