"""``fg`` command: run one experiment from a config file.

    fg <subcommand> [--config FILE] [--preset P] [--seed N] [--full-data] [--out DIR]

The config is YAML or JSON holding :class:`ExperimentConfig` fields, with
``train`` as a nested mapping of :class:`TrainConfig` fields.  Flags
override the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .errors import FgError
from .experiments import KINDS, PRESETS, RUNNERS, ExperimentConfig, SweepTable


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fg", description="Feedback-gated ReLU experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=RUNNERS[kind].__doc__.strip().splitlines()[0])
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int)
        p.add_argument("--full-data", action="store_true", default=None)
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="trained network (eval and analysis kinds)")
        p.add_argument("-v", "--verbose", action="store_true")
        if kind == "eval":
            p.add_argument("--sigma", type=float, default=0.0)
    return ap


def make_config(args) -> ExperimentConfig:
    overrides = {"kind": args.command, "preset": args.preset, "out": args.out,
                 "full_data": args.full_data, "checkpoint": args.checkpoint}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, **overrides)
    else:
        cfg = ExperimentConfig(**overrides)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    return cfg


def _report(result) -> str:
    if isinstance(result, SweepTable):
        return json.dumps({"rows": len(result.rows), "best": result.best}, default=str)
    if isinstance(result, dict):
        keep = {k: v for k, v in result.items()
                if k in ("summary", "accuracy", "accuracy_delta", "loss", "units", "gains")}
        if "histograms" in result:
            keep["layers"] = sorted(result["histograms"])
        return json.dumps(keep, default=str)
    return json.dumps({"status": result.status, "final_test_loss": result.final_test_loss})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        cfg = make_config(args)
        if args.command == "eval":
            result = RUNNERS["eval"](cfg, sigma=args.sigma)
        else:
            result = RUNNERS[args.command](cfg)
    except (FgError, FileNotFoundError) as exc:
        print(f"fg: error: {exc}", file=sys.stderr)
        return 2
    print(_report(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
