"""Command line entry point for the observation impact experiments."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Iterable

from . import experiments
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ObsImpactError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

Runner = Callable[[ExperimentConfig], experiments.ExperimentReport]

_experiment_runners: Dict[str, Runner] = {
    "assimilate": experiments.run_assimilation,
    "prune": experiments.run_pruning,
    "fault-detect": experiments.run_fault_detection,
    "spectrum": experiments.run_spectrum_report,
    "impact": experiments.run_impact_report,
}

_DESCRIPTIONS = {
    "assimilate": "Assimilate perfect and noisy observations and write sensitivity fields",
    "prune": "Split observations into HIGH and LOW sensitivity halves and re-assimilate each",
    "fault-detect": "Inflate observations at the configured cells and flag them from their sensitivity",
    "spectrum": "Write the singular value spectrum and dominant directions of the impact matrix",
    "impact": "Write the analysis response to single h observations at the center and a corner",
}


def parse_args(argv: Iterable[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="4D-Var observation sensitivity and impact experiments")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in _experiment_runners:
        sub = subparsers.add_parser(name, help=_DESCRIPTIONS[name], description=_DESCRIPTIONS[name])
        sub.add_argument(
            "--config",
            type=Path,
            required=True,
            help="Path to an INI experiment configuration (see configs/).",
        )
        sub.add_argument(
            "--output",
            type=Path,
            help="Directory for the CSV outputs. Overrides experiment.output_dir.",
        )
        sub.add_argument(
            "--seed",
            type=int,
            help="Replace every random seed in the configuration with this value.",
        )
        sub.add_argument(
            "--verbose",
            action="store_true",
            help="Log at DEBUG level, including per-iteration optimizer output.",
        )
    return parser.parse_args(argv)


def main(argv: Iterable[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        config = load_config(args.config).with_overrides(output_dir=args.output, seed=args.seed)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    runner = _experiment_runners[args.command]
    try:
        report = runner(config)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ObsImpactError as exc:
        print(f"error [{exc.phase or args.command}]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    print(f"{report.name}: wrote {len(report.files)} files to {report.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
