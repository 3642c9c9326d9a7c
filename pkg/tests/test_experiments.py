from __future__ import annotations

from dataclasses import replace
import shutil

import pytest

from src import experiments
from src.config import ExperimentConfig
from src.errors import ConfigError
from src.store import read_csv, read_json, read_jsonl, write_csv

KINDS = ["snip", "synflow", "jacob_cov", "grad_norm"]


def _mk_cfg(tmp_path, kind: str = "rank_compare", **overrides) -> ExperimentConfig:
    data = {
        "kind": kind,
        "output_dir": str(tmp_path / "out"),
        "ground_truth_dir": str(tmp_path / "gt"),
        "seeds": [0],
        "workers": 1,
        "dataset": {"source": "synthetic", "seed": 0, "synthetic": {"n_total": 48, "n_train": 32, "hw": 8, "num_classes": 4, "num_labelers": 4}},
        "macro": {"stages": 2, "cells_per_stage": 1, "init_channels": 4, "num_classes": 4, "image_hw": 8},
        "pool": {"size": 3, "seed": 0},
        "threshold": {"hog": {"cell": 4}, "hidden_sizes": [8, 8], "epochs": 1, "batch": 16},
        "fear": {"tau": 0.3, "tau_source": "config", "stage2_epochs": 1, "stage1_max_epochs": 2, "batch": 16},
        "shortreg": {"epochs": [1, 2], "batches": [16]},
        "ground_truth": {"epochs": 2, "batch": 16},
        "zero_cost": {"batch": 4, "epochs": 1, "kinds": KINDS},
        "search": {"budget": 4, "shortreg_epochs": 1, "shortreg_batch": 16},
    }
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


def _gt(tmp_path) -> None:
    experiments.run_ground_truth_build(_mk_cfg(tmp_path, "ground_truth_build"))


def test_resolve_pool_explicit_and_sampled(tmp_path) -> None:
    cfg = _mk_cfg(tmp_path)
    pool = experiments.resolve_pool(cfg)
    assert len(pool) == len(set(pool)) == 3
    assert pool == experiments.resolve_pool(cfg)
    explicit = replace(cfg, pool=replace(cfg.pool, ids=(5, 17)))
    assert experiments.resolve_pool(explicit) == [5, 17]


def test_dataset_must_match_macro(tmp_path) -> None:
    cfg = _mk_cfg(tmp_path)
    with pytest.raises(ConfigError):
        experiments.experiment_dataset(cfg.dataset, replace(cfg.macro, num_classes=10))


def test_ground_truth_build_is_resumable(tmp_path, monkeypatch) -> None:
    _gt(tmp_path)
    header, records = read_jsonl(tmp_path / "gt" / "ground_truth.jsonl")
    assert header["kind"] == "ground_truth"
    assert len(records) == 3
    summary = read_json(tmp_path / "gt" / "ground_truth_summary.json")
    assert len(summary["per_arch"]) == 3

    def boom(*args):
        raise AssertionError("ground truth recomputed")

    monkeypatch.setattr(experiments, "gt_job", boom)
    _gt(tmp_path)


def test_consumers_need_ground_truth(tmp_path) -> None:
    with pytest.raises(ConfigError):
        experiments.run_rank_compare(_mk_cfg(tmp_path))


def test_rank_compare_outputs(tmp_path) -> None:
    _gt(tmp_path)
    bins = experiments.run_rank_compare(_mk_cfg(tmp_path))
    config, rows = read_csv(bins)
    assert config["kind"] == "rank_compare"
    methods = {r["method"] for r in rows}
    assert {"fear", "shortreg_e1_b16", "shortreg_e2_b16", "vote", *KINDS} <= methods
    fear = [r for r in rows if r["method"] == "fear"]
    assert [int(r["bin_percent"]) for r in fear] == [10, 20, 30, 40, 50, 100]
    whole = {r["method"]: float(r["avg_cost_units"]) for r in rows if r["bin_percent"] == "100"}
    assert whole["synflow"] < whole["fear"]
    assert whole["snip"] < whole["shortreg_e1_b16"]
    manifest = read_json(tmp_path / "out" / "manifest.json")
    assert manifest["seeds"] == [0]
    assert "bins.csv" in manifest["files"]


def test_rank_compare_rerun_is_byte_identical_except_wall_time(tmp_path) -> None:
    _gt(tmp_path)
    cfg = _mk_cfg(tmp_path)
    experiments.run_rank_compare(cfg)
    first = tmp_path / "first"
    shutil.move(str(tmp_path / "out"), str(first))
    experiments.run_rank_compare(cfg)

    def strip(path):
        _, records = read_jsonl(path)
        return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]

    assert strip(first / "evals.jsonl") == strip(tmp_path / "out" / "evals.jsonl")
    assert strip(first / "proxies.jsonl") == strip(tmp_path / "out" / "proxies.jsonl")
    _, a = read_csv(first / "bins.csv")
    _, b = read_csv(tmp_path / "out" / "bins.csv")
    assert [{k: v for k, v in r.items() if k != "avg_wall_ms"} for r in a] == [
        {k: v for k, v in r.items() if k != "avg_wall_ms"} for r in b
    ]


def test_plot_data_frontier_and_nearest(tmp_path) -> None:
    cfg = _mk_cfg(tmp_path)
    points = {
        "fear": (50.0, 0.8, 0.6),
        "shortreg_e1_b16": (20.0, 0.3, 0.2),
        "shortreg_e2_b16": (40.0, 0.5, 0.4),
        "shortreg_e4_b16": (80.0, 0.4, 0.4),
        "shortreg_e8_b16": (160.0, 0.9, 0.7),
    }
    rows = [
        {"seed": 0, "method": m, "bin_percent": 100, "spearman": s, "common_ratio": c, "avg_cost_units": cost, "n_in_bin": 5}
        for m, (cost, s, c) in points.items()
    ]
    write_csv(tmp_path / "out" / "bins.csv", experiments.BIN_COLUMNS, rows, cfg.to_dict())
    pareto = experiments.run_plot_data(cfg)
    _, out = read_csv(pareto)
    on = sorted(r["method"] for r in out if r["on_frontier"] == "True")
    assert on == ["shortreg_e1_b16", "shortreg_e2_b16", "shortreg_e8_b16"]
    assert len(out) == 4
    _, nearest = read_csv(tmp_path / "out" / "nearest_frontier.csv")
    assert len(nearest) == 1
    assert nearest[0]["shortreg_method"] == "shortreg_e2_b16"
    assert float(nearest[0]["fear_spearman"]) == 0.8


def test_plot_data_needs_bins(tmp_path) -> None:
    with pytest.raises(ConfigError):
        experiments.run_plot_data(_mk_cfg(tmp_path))


def test_time_to_threshold_rows(tmp_path) -> None:
    _gt(tmp_path)
    path = experiments.run_time_to_threshold(_mk_cfg(tmp_path, "time_to_threshold"))
    _, rows = read_csv(path)
    assert len(rows) == 3
    for row in rows:
        assert row["timeout"] == str(row["reached_threshold"] == "False")
        assert row["gt_accuracy"] != ""
    manifest = read_json(tmp_path / "out" / "manifest.json")
    assert "spearman_epochs_vs_gt" in manifest["summary"]


def test_zero_cost_over_epochs_row_count(tmp_path) -> None:
    _gt(tmp_path)
    path = experiments.run_zero_cost_over_epochs(_mk_cfg(tmp_path, "zero_cost_over_epochs"))
    _, rows = read_csv(path)
    assert len(rows) == len(KINDS) * 2
    assert {int(r["epoch"]) for r in rows} == {0, 1}


def test_synthetic_zero_cost_table(tmp_path) -> None:
    path = experiments.run_synthetic_zero_cost(_mk_cfg(tmp_path, "synthetic_zero_cost"))
    _, rows = read_csv(path)
    methods = {r["method"] for r in rows}
    assert "fear" in methods and "synflow" in methods
    fear = next(r for r in rows if r["method"] == "fear")
    assert float(fear["avg_cost_units"]) > 0
    assert "synflow_reference_data" not in methods


def test_synthetic_zero_cost_compares_synflow_with_reference_data(tmp_path) -> None:
    synthetic = {"n_total": 48, "n_train": 32, "hw": 8, "num_classes": 4, "num_labelers": 4}
    data_path = experiments.run_gen_data(
        _mk_cfg(tmp_path, output_dir=str(tmp_path / "data"), dataset={"source": "synthetic", "seed": 1, "synthetic": synthetic})
    )
    reference = {"source": "file", "seed": 0, "synthetic": synthetic, "paths": [str(data_path)]}
    experiments.run_ground_truth_build(
        _mk_cfg(tmp_path, "ground_truth_build", output_dir=str(tmp_path / "ref"), ground_truth_dir=str(tmp_path / "ref"), dataset=reference)
    )

    cfg = _mk_cfg(tmp_path, "synthetic_zero_cost", ground_truth_dir=str(tmp_path / "ref"), dataset=reference)
    path = experiments.run_synthetic_zero_cost(cfg)
    _, rows = read_csv(path)
    by_method = {r["method"]: r for r in rows}
    assert {"synflow", "synflow_reference_data"} <= set(by_method)
    assert by_method["synflow_reference_data"]["avg_cost_units"] == by_method["synflow"]["avg_cost_units"]

    summary = read_json(tmp_path / "out" / "manifest.json")["summary"]
    entry = summary["synflow_synthetic_vs_reference"]["0"]
    assert set(entry) == {"synthetic", "reference", "synthetic_not_above_reference"}
    if entry["synthetic"] is not None and entry["reference"] is not None:
        assert entry["synthetic_not_above_reference"] == (entry["synthetic"] <= entry["reference"])


def test_search_compare_replays_and_summarises(tmp_path) -> None:
    path = experiments.run_random_search_compare(_mk_cfg(tmp_path, "random_search_compare"))
    _, rows = read_csv(path)
    assert [r["method"] for r in rows] == ["rs_fear", "rs_shortreg"]
    assert all(r["best_gt_accuracy"] != "" for r in rows)
    assert all(int(r["evaluated"]) == 4 for r in rows)
    manifest = read_json(tmp_path / "out" / "manifest.json")
    assert manifest["summary"]["replay"]["0"]["match"] is True
    header, trace = read_jsonl(tmp_path / "out" / "trace.jsonl")
    assert header["kind"] == "random_search_compare"
    fear_archs = [r["arch"] for r in trace if r["method"] == "rs_fear"]
    short_archs = [r["arch"] for r in trace if r["method"] == "rs_shortreg"]
    assert fear_archs == short_archs


def test_threshold_learner_taus_are_cached(tmp_path) -> None:
    cfg = _mk_cfg(tmp_path, fear={"tau_source": "learner", "stage1_max_epochs": 2, "batch": 16})
    taus = experiments.run_threshold(cfg)
    assert set(taus) == {0}
    assert 0.0 < taus[0] < 1.0
    _, records = read_jsonl(tmp_path / "out" / "thresholds.jsonl")
    assert len(records) == 1
    assert experiments.run_threshold(cfg) == taus


def test_gen_data_writes_loadable_file(tmp_path) -> None:
    from src.datasets import load_dataset

    path = experiments.run_gen_data(_mk_cfg(tmp_path))
    assert len(load_dataset(path)) == 48
