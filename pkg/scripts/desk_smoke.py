from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

sys.path.append(str(Path(__file__).resolve().parents[1]))

from src.config import ExperimentConfig
from src.experiments import (
    run_ground_truth_build,
    run_plot_data,
    run_random_search_compare,
    run_rank_compare,
    run_time_to_threshold,
    run_zero_cost_over_epochs,
)
from src.logger import setup_logger
from src.store import read_json


def run_smoke(config_path: str, out: str) -> None:
    logger = setup_logger(f"{out}/smoke.log")
    base = ExperimentConfig.from_file(config_path)
    base = replace(base, output_dir=out, ground_truth_dir=f"{out}/gt")
    run_ground_truth_build(replace(base, kind="ground_truth_build"))
    for kind, runner in (
        ("rank_compare", run_rank_compare),
        ("time_to_threshold", run_time_to_threshold),
        ("zero_cost_over_epochs", run_zero_cost_over_epochs),
        ("random_search_compare", run_random_search_compare),
    ):
        sub = f"{out}/{kind}"
        runner(replace(base, kind=kind, output_dir=sub))
        manifest = read_json(f"{sub}/manifest.json")
        logger.info("smoke_step | kind=%s files=%s", kind, manifest["files"])
    run_plot_data(replace(base, output_dir=f"{out}/rank_compare"))
    logger.info("smoke_done | out=%s", out)


def main() -> None:
    parser = argparse.ArgumentParser(description="Run every experiment kind on a tiny config")
    parser.add_argument("--config", default="configs/smoke.toml")
    parser.add_argument("--out", default="runs/smoke")
    args = parser.parse_args()
    try:
        run_smoke(args.config, args.out)
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
