"""Command line interface for the pod-scaling simulator."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from tabulate import tabulate

from pod_scaling.config import load_config
from pod_scaling.errors import ConfigError, DivergenceError, InvariantViolation
from pod_scaling.experiments import apply_seed_override, run_experiment, summary_table, write_reports
from pod_scaling.report import write_error_record
from pod_scaling.tensor_core import load_tensor

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_DIVERGENCE = 4


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="[%(levelname)s] %(message)s",
    )


def _fail(code: int, error: Exception, out_dir: Optional[Path], details: Dict[str, Any]) -> int:
    payload = {"error": type(error).__name__, "message": str(error), **details}
    text = write_error_record(out_dir / "error.json" if out_dir else None, payload)
    print(text, file=sys.stderr)
    return code


def _run(args: argparse.Namespace) -> int:
    out_dir: Optional[Path] = args.out
    try:
        cfg = load_config(args.config)
    except (ConfigError, FileNotFoundError) as exc:
        details = exc.details() if isinstance(exc, ConfigError) else {"field": "<file>"}
        return _fail(EXIT_CONFIG, exc, out_dir, details)
    if args.seed_override is not None:
        cfg = apply_seed_override(cfg, args.seed_override)
    if out_dir is None:
        out_dir = Path(cfg.output) if cfg.output else Path("out") / cfg.kind.value

    try:
        result = run_experiment(cfg, jobs=args.jobs)
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGENCE, exc, out_dir, exc.details())
    except InvariantViolation as exc:
        return _fail(EXIT_INVARIANT, exc, out_dir, exc.details())
    except FileNotFoundError as exc:
        return _fail(EXIT_CONFIG, exc, out_dir, {"field": "pipeline_study.corpus"})
    except ValueError as exc:
        details = exc.details() if isinstance(exc, ConfigError) else {"field": getattr(exc, "axis", None) or "<run>"}
        return _fail(EXIT_CONFIG, exc, out_dir, details)

    print(summary_table(result))
    for path in write_reports(result, out_dir):
        logger.debug("report %s", path)
    if result.violation is not None:
        row = result.violation
        error = InvariantViolation(f"{row.check} {row.case} disagrees with its oracle", row.max_deviation, row.location)
        return _fail(EXIT_INVARIANT, error, out_dir, error.details())
    logger.info("Results saved in %s", out_dir)
    return EXIT_OK


def _tensor_info(args: argparse.Namespace) -> int:
    try:
        tensor = load_tensor(args.path)
    except (FileNotFoundError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    data = tensor.data
    rows: List[List[Any]] = [
        ["shape", "x".join(str(d) for d in tensor.shape) or "scalar"],
        ["dtype", tensor.dtype.value],
        ["min", float(np.min(data)) if data.size else ""],
        ["max", float(np.max(data)) if data.size else ""],
    ]
    print(tabulate(rows, tablefmt="github"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="Show per-step and per-phase detail")
    parser = argparse.ArgumentParser(description="Simulate data-parallel training at pod scale")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", parents=[common], help="Run one experiment from a JSON config")
    run.add_argument("config", type=Path, help="Path to the experiment config")
    run.add_argument("--out", type=Path, help="Directory for report files")
    run.add_argument("--jobs", type=int, default=1, help="Worker processes for independent seeds")
    run.add_argument("--seed-override", type=int, help="Replace the config seed")
    run.set_defaults(handler=_run)

    info = commands.add_parser("tensor-info", parents=[common], help="Describe a tensor fixture file")
    info.add_argument("path", type=Path, help="Fixture written by save_tensor")
    info.set_defaults(handler=_tensor_info)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
