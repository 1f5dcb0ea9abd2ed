"""Command-line entry point: ``ibo-eval <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .errors import ConfigurationError, DataError
from .runner import ExperimentConfig, report, run_pipeline

# subcommand -> last pipeline stage it runs
_STAGE_OF = {
    "synth-data": "data",
    "train-classifier": "classifier",
    "train-ddpm": "ddpm",
    "explain": "explain",
    "mask": "mask",
    "occlude": "occlude",
    "evaluate": "evaluate",
    "run": "report",
}


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibo-eval", description="Occlusion-based evaluation of CAM explainers.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(_STAGE_OF) + ["report"]:
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
        p.add_argument("--output", type=Path, required=True, help="output directory")
        if name == "report":
            continue
        p.add_argument("--resume", action="store_true", help="continue a run in an existing output directory")
        p.add_argument("--samples", type=int, help="number of tumor test samples")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--strategies", type=_csv_list, help="comma-separated occlusion strategies")
        p.add_argument("--explainers", type=_csv_list, help="comma-separated explainers")
    return parser


def load_config(args) -> ExperimentConfig:
    data = ExperimentConfig.load(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    for key in ("samples", "seed", "strategies", "explainers"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            manifest_path = args.output / "manifest.json"
            if not manifest_path.exists():
                raise ConfigurationError(f"no manifest at {manifest_path}")
            rdir = report(io.read_json(manifest_path), args.output)
            print(rdir)
            return 0
        cfg = load_config(args)
        manifest = run_pipeline(cfg, args.output, resume=args.resume, stop_after=_STAGE_OF[args.command])
    except (ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name, rec in manifest["stages"].items():
        print(f"{name:12s} computed={rec['computed']:<5d} cached={rec['cached']:<5d} {rec['seconds']:.1f}s")
    if manifest["failures"]:
        print(f"{len(manifest['failures'])} failures recorded in {args.output / 'manifest.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
