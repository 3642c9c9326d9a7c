from __future__ import annotations

import argparse
from dataclasses import replace
import json
import logging
import sys
import time
from typing import Any, Callable, Sequence

from src.config import LOG_FILE, PROFILE, ExperimentConfig
from src.errors import BenchError, ConfigError
from src.experiments import (
    run_gen_data,
    run_ground_truth_build,
    run_plot_data,
    run_random_search_compare,
    run_rank_compare,
    run_synthetic_zero_cost,
    run_threshold,
    run_time_to_threshold,
    run_zero_cost_over_epochs,
)
from src.logger import setup_logger

# verb -> (experiment kind recorded in the config, runner)
VERBS: dict[str, tuple[str | None, Callable[[ExperimentConfig], Any]]] = {
    "gen-data": (None, run_gen_data),
    "threshold": (None, run_threshold),
    "ground-truth": ("ground_truth_build", run_ground_truth_build),
    "rank-compare": ("rank_compare", run_rank_compare),
    "time-to-threshold": ("time_to_threshold", run_time_to_threshold),
    "zc-epochs": ("zero_cost_over_epochs", run_zero_cost_over_epochs),
    "synthetic-zc": ("synthetic_zero_cost", run_synthetic_zero_cost),
    "search-compare": ("random_search_compare", run_random_search_compare),
    "plot-data": (None, run_plot_data),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fear_bench", description="FEAR architecture evaluation workbench")
    parser.add_argument("verb", choices=sorted(VERBS), help="Experiment to run")
    parser.add_argument("--config", default=None, help="TOML experiment config")
    parser.add_argument("--out", default=None, help="Output directory (overrides output_dir)")
    parser.add_argument("--ground-truth-dir", default=None, help="Ground-truth store directory")
    parser.add_argument("--seed", type=int, default=None, help="Run a single seed")
    parser.add_argument("--workers", type=int, default=None, help="Worker processes")
    parser.add_argument("--log-file", default=LOG_FILE)
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    kind, _ = VERBS[args.verb]
    overrides: dict[str, Any] = {}
    if kind is not None:
        overrides["kind"] = kind
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.ground_truth_dir is not None:
        overrides["ground_truth_dir"] = args.ground_truth_dir
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.workers is not None:
        overrides["workers"] = args.workers
    try:
        return replace(cfg, **overrides)
    except TypeError as exc:
        raise ConfigError(f"bad override: {exc}") from exc


def _fail(exc: BenchError | Exception) -> None:
    payload = exc.to_dict() if isinstance(exc, BenchError) else {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logger = setup_logger(args.log_file, logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = resolve_config(args)
        _, runner = VERBS[args.verb]
        logger.info(
            "Starting fear_bench | PROFILE=%s verb=%s out=%s seeds=%s workers=%d",
            PROFILE,
            args.verb,
            cfg.output_dir,
            list(cfg.seeds),
            cfg.workers,
        )
        started = time.perf_counter()
        result = runner(cfg)
        logger.info("Finished | verb=%s result=%s elapsed_sec=%.1f", args.verb, result, time.perf_counter() - started)
    except ConfigError as exc:
        _fail(exc)
        return 2
    except (BenchError, OSError, ValueError) as exc:
        _fail(exc)
        return 1
    except KeyboardInterrupt:
        print("Stopped by user at", time.strftime("%Y-%m-%d %H:%M:%S"), file=sys.stderr)
        return 130
    except Exception as exc:
        logger.exception("Unexpected failure | verb=%s", args.verb)
        _fail(exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
