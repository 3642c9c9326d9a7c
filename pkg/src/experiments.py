"""Experiment orchestration: datasets, thresholds, worker pool and outputs.

Jobs run in a process pool whose workers receive the experiment config, the
dataset and the per-seed thresholds once, at start-up. Results come back in
submission order and only the main process writes files, so a rerun with
the same config reproduces every output byte for byte (``wall_ms`` aside).
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import partial
import math
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from src.config import SPACE_SIZE, DatasetSpec, ExperimentConfig, FearConfig, MacroConfig
from src.datasets import (
    ImageDataset,
    generate_synthetic,
    load_cifar10_binary,
    load_dataset,
    normalize,
    save_dataset,
    subset,
)
from src.errors import ConfigError, NumericError
from src.evaluators import (
    STOP_MAX_EPOCHS,
    STOP_NON_FINITE,
    EvalContext,
    EvalOutcome,
    fear_evaluate,
    ground_truth_record,
    shortreg_evaluate,
    train_to_threshold,
    training_checkpoints,
)
from src.logger import get_logger
from src.metrics import bin_report, nearest_by_cost, pareto_indices, spearman
from src.rng import stream
from src.search import SearchTrace, random_search_fear, random_search_shortreg, replay_search
from src.search_space import decode, parse_arch
from src.store import JsonlStore, read_csv, read_jsonl, write_csv, write_json, write_jsonl
from src.threshold import fit_threshold_learner
from src.zero_cost import VOTE_KINDS, compute_proxies, vote_scores

logger = get_logger("experiments")

GROUND_TRUTH_FILE = "ground_truth.jsonl"
BIN_COLUMNS = (
    "seed",
    "method",
    "bin_percent",
    "spearman",
    "common_ratio",
    "avg_cost_units",
    "avg_wall_ms",
    "n_in_bin",
    "n_failed",
)
NOTES = (
    "zero-cost cost_units count forward/backward passes only, not model instantiation",
    "synflow_bn runs batchnorm in training mode on a batch of two all-ones inputs",
    "no data augmentation is applied anywhere",
    "FEAR stage 1 follows the full-training cosine schedule; the threshold is checked at epoch ends",
)

_DATASETS: dict[DatasetSpec, ImageDataset] = {}
_STATE: dict[str, Any] = {}


# datasets and pools


def raw_dataset(spec: DatasetSpec) -> ImageDataset:
    if spec.source == "synthetic":
        ds = generate_synthetic(spec.synthetic, spec.seed)
    elif spec.source == "cifar10":
        ds = load_cifar10_binary(spec.paths, spec.test_paths)
    else:
        ds = load_dataset(spec.paths[0])
    return subset(ds, spec.limit_train, spec.limit_test)


def experiment_dataset(spec: DatasetSpec, macro: MacroConfig) -> ImageDataset:
    """Normalised dataset for ``spec``, cached per process."""
    if spec not in _DATASETS:
        ds = normalize(raw_dataset(spec))
        logger.info("dataset_ready | name=%s n=%d train=%d test=%d", ds.name, len(ds), len(ds.train_idx), len(ds.test_idx))
        _DATASETS[spec] = ds
    ds = _DATASETS[spec]
    if ds.image_hw != macro.image_hw or ds.num_classes != macro.num_classes:
        raise ConfigError(
            "dataset does not match the macro skeleton",
            image_hw=ds.image_hw,
            num_classes=ds.num_classes,
            macro_hw=macro.image_hw,
            macro_classes=macro.num_classes,
        )
    if len(ds.test_idx) == 0:
        raise ConfigError("dataset has no test split")
    return ds


def resolve_pool(cfg: ExperimentConfig) -> list[int]:
    if cfg.pool.ids:
        return [parse_arch(a) for a in cfg.pool.ids]
    rng = stream(cfg.pool.seed, "pool")
    return [int(a) for a in rng.choice(SPACE_SIZE, size=cfg.pool.size, replace=False)]


def _ground_truth_header(cfg: ExperimentConfig) -> dict[str, Any]:
    full = cfg.to_dict()
    return {"kind": "ground_truth", **{k: full[k] for k in ("dataset", "macro", "sgd", "ground_truth")}}


def _header(cfg: ExperimentConfig, kind: str) -> dict[str, Any]:
    return {"kind": kind, "config": cfg.to_dict()}


def load_ground_truth(cfg: ExperimentConfig, pool: Sequence[int]) -> dict[int, float]:
    """Mean test accuracy over stored seeds for every pool member."""
    path = cfg.gt_dir / GROUND_TRUTH_FILE
    if not path.exists():
        raise ConfigError(f"ground-truth store {path} not found; run ground-truth first", path=str(path))
    _, records = read_jsonl(path)
    accs: dict[int, list[float]] = {}
    for record in records:
        if record.get("test_accuracy") is not None:
            accs.setdefault(record["arch"], []).append(record["test_accuracy"])
    missing = [a for a in pool if a not in accs]
    if missing:
        raise ConfigError(f"ground truth missing for {len(missing)} pool architectures", missing=missing[:10])
    return {arch: float(np.mean(accs[arch])) for arch in pool}


# worker pool


def _install(cfg: ExperimentConfig, ds: ImageDataset, taus: dict[int, float]) -> None:
    _STATE.update(cfg=cfg, ds=ds, taus=dict(taus))


def _context(seed: int) -> EvalContext:
    cfg: ExperimentConfig = _STATE["cfg"]
    return EvalContext(ds=_STATE["ds"], macro=cfg.macro, sgd=cfg.sgd, seed=seed, horizon_epochs=cfg.ground_truth.epochs)


def _fear_cfg(seed: int) -> FearConfig:
    return replace(_STATE["cfg"].fear, tau=_STATE["taus"][seed])


class JobRunner:
    """Maps job functions over argument lists, in a process pool when
    ``workers > 1``; results keep submission order."""

    def __init__(self, cfg: ExperimentConfig, ds: ImageDataset, taus: dict[int, float]) -> None:
        self.cfg = cfg
        self.ds = ds
        self.taus = taus
        self._pool: ProcessPoolExecutor | None = None

    def __enter__(self) -> JobRunner:
        _install(self.cfg, self.ds, self.taus)
        if self.cfg.workers > 1:
            self._pool = ProcessPoolExecutor(
                max_workers=self.cfg.workers, initializer=_install, initargs=(self.cfg, self.ds, self.taus)
            )
        return self

    def __exit__(self, *exc: object) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def map(self, fn: Callable[..., Any], *iterables: Iterable[Any]) -> list[Any]:
        if self._pool is None:
            return list(map(fn, *iterables))
        return list(self._pool.map(fn, *iterables))


def gt_job(arch: int, seed: int) -> dict[str, Any]:
    return ground_truth_record(arch, _context(seed), _STATE["cfg"].ground_truth).to_dict()


def fear_job(arch: int, seed: int) -> dict[str, Any]:
    return fear_evaluate(arch, _context(seed), _fear_cfg(seed)).to_dict()


def search_fear_job(arch: int, fastest: float, *, seed: int) -> dict[str, Any]:
    fcfg = replace(_fear_cfg(seed), reject_ratio=_STATE["cfg"].search.reject_ratio)
    return fear_evaluate(arch, _context(seed), fcfg, fastest).to_dict()


def shortreg_job(arch: int, seed: int, epochs: int, batch: int) -> dict[str, Any]:
    metric = _STATE["cfg"].shortreg.score_metric
    return shortreg_evaluate(arch, _context(seed), epochs, batch, metric).to_dict()


def search_shortreg_job(arch: int, fastest: float, *, seed: int) -> dict[str, Any]:
    cfg: ExperimentConfig = _STATE["cfg"]
    return shortreg_evaluate(
        arch, _context(seed), cfg.search.shortreg_epochs, cfg.search.shortreg_batch, cfg.shortreg.score_metric
    ).to_dict()


def stage1_job(arch: int, seed: int) -> dict[str, Any]:
    """Unbudgeted time-to-threshold, stage 1 only."""
    ctx = _context(seed)
    fcfg = _fear_cfg(seed)
    net = ctx.build(arch)
    run = train_to_threshold(
        net, ctx.ds, fcfg.tau, None, fcfg, sgd=ctx.schedule(ctx.horizon_epochs, fcfg.batch), rng=ctx.batch_rng(arch)
    )
    rejected = run.stop_reason == STOP_NON_FINITE
    return EvalOutcome(
        arch=arch,
        method="stage1",
        seed=seed,
        reached_threshold=run.reached,
        score=None if rejected else run.metric,
        cost_units=max(run.cost, 1),
        wall_ms=0,
        epochs_stage1=run.epochs,
        epochs_stage2=0,
        rejected_early=rejected,
        stop_reason=run.stop_reason,
        stage1_cost=run.cost,
    ).to_dict()


def proxy_batch(ds: ImageDataset, seed: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(ds.train_idx)
    idx = np.sort(stream(seed, "proxy.batch").choice(n, size=min(size, n), replace=False))
    return ds.train_images[idx], ds.train_labels[idx]


def proxy_job(arch: int, seed: int, epochs: int) -> list[dict[str, Any]]:
    """Every configured proxy at initialisation and after each training epoch."""
    cfg: ExperimentConfig = _STATE["cfg"]
    ctx = _context(seed)
    images, labels = proxy_batch(ctx.ds, seed, cfg.zero_cost.batch)
    rows: list[dict[str, Any]] = []
    done = -1
    try:
        for epoch, net in training_checkpoints(arch, ctx, epochs, cfg.ground_truth.batch):
            done = epoch
            for kind in cfg.zero_cost.kinds:
                row = {"kind": kind, "arch": arch, "seed": seed, "epoch": epoch}
                try:
                    score = compute_proxies(net, images, labels, [kind])[kind]
                    row.update(score=score.score, cost_units=score.cost_units, wall_ms=score.wall_ms, failure=None)
                except NumericError:
                    row.update(score=None, cost_units=0, wall_ms=0, failure=STOP_NON_FINITE)
                rows.append(row)
    except NumericError:
        for epoch in range(done + 1, epochs + 1):
            for kind in cfg.zero_cost.kinds:
                rows.append(
                    {"kind": kind, "arch": arch, "seed": seed, "epoch": epoch, "score": None, "cost_units": 0, "wall_ms": 0, "failure": STOP_NON_FINITE}
                )
    return rows


# shared steps


def resolve_taus(cfg: ExperimentConfig, ds: ImageDataset, out: Path) -> dict[int, float]:
    """Threshold per seed, cached in ``thresholds.jsonl``."""
    if cfg.fear.tau_source == "config":
        return {seed: cfg.fear.tau for seed in cfg.seeds}
    store = JsonlStore(out / "thresholds.jsonl", ("seed",), _header(cfg, "threshold"))
    taus: dict[int, float] = {}
    for seed in cfg.seeds:
        if (seed,) not in store:
            result = fit_threshold_learner(ds, replace(cfg.threshold, seed=seed))
            store.append({"seed": seed, **result.to_dict()})
        tau = float(store.get((seed,))["tau"])
        clamped = min(max(tau, 1e-3), 0.999)
        if clamped != tau:
            logger.warning("tau_clamped | seed=%d tau=%.4f used=%.4f", seed, tau, clamped)
        taus[seed] = clamped
    store.compact()
    return taus


def _fill(store: JsonlStore, runner: JobRunner, fn: Callable[..., Any], jobs: list[tuple[Any, ...]], keys: list[tuple[Any, ...]]) -> None:
    pending = [(job, key) for job, key in zip(jobs, keys) if key not in store]
    if not pending:
        return
    logger.info("jobs_start | fn=%s pending=%d stored=%d", fn.__name__, len(pending), len(store))
    results = runner.map(fn, *zip(*[job for job, _ in pending]))
    for result in results:
        for record in result if isinstance(result, list) else [result]:
            store.append(record)


def _fill_proxies(store: JsonlStore, runner: JobRunner, cfg: ExperimentConfig, pool: Sequence[int], epochs: int) -> None:
    if "synflow_bn" in cfg.zero_cost.kinds:
        logger.warning("proxy_interpretation | kind=synflow_bn batchnorm=train input=two_ones")
    jobs, keys = [], []
    for seed in cfg.seeds:
        for arch in pool:
            needed = [(k, arch, seed, e) for k in cfg.zero_cost.kinds for e in range(epochs + 1)]
            if all(key in store for key in needed):
                continue
            jobs.append((arch, seed, epochs))
            keys.append(("__job__", arch, seed, epochs))
    _fill(store, runner, proxy_job, jobs, keys)


def _method_scores(records: Iterable[dict[str, Any]], seed: int) -> dict[str, dict[str, dict[int, float]]]:
    """method -> {"score": {arch: s}, "cost": {...}, "wall": {...}} for completed evaluations."""
    table: dict[str, dict[str, dict[int, float]]] = {}
    for r in records:
        if r["seed"] != seed or r.get("score") is None:
            continue
        entry = table.setdefault(r["method"], {"score": {}, "cost": {}, "wall": {}})
        entry["score"][r["arch"]] = r["score"]
        entry["cost"][r["arch"]] = r["cost_units"]
        entry["wall"][r["arch"]] = r["wall_ms"]
    return table


def _proxy_scores(records: Iterable[dict[str, Any]], seed: int, epoch: int) -> dict[str, dict[str, dict[int, float]]]:
    table: dict[str, dict[str, dict[int, float]]] = {}
    for r in records:
        if r["seed"] != seed or r["epoch"] != epoch or r.get("score") is None:
            continue
        entry = table.setdefault(r["kind"], {"score": {}, "cost": {}, "wall": {}})
        entry["score"][r["arch"]] = r["score"]
        entry["cost"][r["arch"]] = r["cost_units"]
        entry["wall"][r["arch"]] = r["wall_ms"]
    vote_kinds = [k.value for k in VOTE_KINDS]
    if all(k in table for k in vote_kinds):
        archs = sorted(set.intersection(*(set(table[k]["score"]) for k in vote_kinds)))
        if archs:
            per_arch = {a: {k: table[k]["score"][a] for k in vote_kinds} for a in archs}
            table["vote"] = {
                "score": vote_scores(archs, per_arch),
                "cost": {a: sum(table[k]["cost"][a] for k in vote_kinds) for a in archs},
                "wall": {a: sum(table[k]["wall"][a] for k in vote_kinds) for a in archs},
            }
    return table


def _bins_rows(seed: int, gt: dict[int, float], table: dict[str, dict[str, dict[int, float]]]) -> list[dict[str, Any]]:
    rows = []
    for method in sorted(table):
        entry = table[method]
        for report in bin_report(method, gt, entry["score"], entry["cost"], entry["wall"]):
            rows.append({"seed": seed, **report.to_dict()})
    return rows


def _prepare(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, cfg: ExperimentConfig, kind: str, summary: dict[str, Any], files: list[Path], taus: dict[int, float] | None = None) -> Path:
    payload = {
        "kind": kind,
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "tau": {str(k): v for k, v in (taus or {}).items()},
        "summary": summary,
        "files": sorted(p.name for p in files),
        "notes": list(NOTES),
    }
    return write_json(out / "manifest.json", payload)


def _describe(arch: int) -> str:
    return decode(arch).to_string()


# experiment kinds


def run_gen_data(cfg: ExperimentConfig) -> Path:
    out = _prepare(cfg)
    ds = raw_dataset(cfg.dataset)
    path = save_dataset(ds, out / f"{ds.name}_seed{cfg.dataset.seed}.fds")
    _write_manifest(out, cfg, "gen_data", {"n": len(ds), "class_counts": ds.class_counts(), "path": str(path)}, [path])
    logger.info("dataset_written | path=%s n=%d", path, len(ds))
    return path


def run_threshold(cfg: ExperimentConfig) -> dict[int, float]:
    out = _prepare(cfg)
    ds = experiment_dataset(cfg.dataset, cfg.macro)
    taus = resolve_taus(cfg, ds, out)
    _write_manifest(out, cfg, "threshold", {"chance": 1.0 / ds.num_classes}, [out / "thresholds.jsonl"], taus)
    return taus


def run_ground_truth_build(cfg: ExperimentConfig) -> Path:
    gt_dir = cfg.gt_dir
    gt_dir.mkdir(parents=True, exist_ok=True)
    pool = resolve_pool(cfg)
    ds = experiment_dataset(cfg.dataset, cfg.macro)
    store = JsonlStore(gt_dir / GROUND_TRUTH_FILE, ("arch", "seed"), _ground_truth_header(cfg))
    jobs = [(arch, seed) for seed in cfg.seeds for arch in pool]
    with JobRunner(cfg, ds, {}) as runner:
        _fill(store, runner, gt_job, jobs, jobs)
    store.compact()

    per_arch: dict[int, list[float]] = {}
    for r in store.records():
        if r["arch"] in pool and r["test_accuracy"] is not None:
            per_arch.setdefault(r["arch"], []).append(r["test_accuracy"])
    means = {a: float(np.mean(v)) for a, v in per_arch.items()}
    summary = {
        "pool": pool,
        "entries": len(store),
        "failed": sum(1 for r in store.records() if r["test_accuracy"] is None),
        "spread": (max(means.values()) - min(means.values())) if means else 0.0,
        "per_arch": [
            {"arch": a, "arch_str": _describe(a), "mean": means[a], "std": float(np.std(per_arch[a])), "n_seeds": len(per_arch[a])}
            for a in sorted(means)
        ],
    }
    write_json(gt_dir / "ground_truth_summary.json", summary)
    logger.info("ground_truth_built | entries=%d spread=%.4f", len(store), summary["spread"])
    return store.path


def run_rank_compare(cfg: ExperimentConfig) -> Path:
    out = _prepare(cfg)
    pool = resolve_pool(cfg)
    gt = load_ground_truth(cfg, pool)
    ds = experiment_dataset(cfg.dataset, cfg.macro)
    taus = resolve_taus(cfg, ds, out)
    evals = JsonlStore(out / "evals.jsonl", ("method", "arch", "seed"), _header(cfg, "rank_compare"))
    proxies = JsonlStore(out / "proxies.jsonl", ("kind", "arch", "seed", "epoch"), _header(cfg, "rank_compare"))

    with JobRunner(cfg, ds, taus) as runner:
        jobs = [(arch, seed) for seed in cfg.seeds for arch in pool]
        _fill(evals, runner, fear_job, jobs, [("fear", a, s) for a, s in jobs])
        for epochs in cfg.shortreg.epochs:
            for batch in cfg.shortreg.batches:
                method = f"shortreg_e{epochs}_b{batch}"
                _fill(
                    evals,
                    runner,
                    shortreg_job,
                    [(a, s, epochs, batch) for a, s in jobs],
                    [(method, a, s) for a, s in jobs],
                )
        _fill_proxies(proxies, runner, cfg, pool, 0)
    evals.compact()
    proxies.compact()

    rows: list[dict[str, Any]] = []
    for seed in cfg.seeds:
        table = _method_scores(evals.records(), seed)
        table.update(_proxy_scores(proxies.records(), seed, 0))
        rows.extend(_bins_rows(seed, gt, table))
    bins = write_csv(out / "bins.csv", BIN_COLUMNS, rows, cfg.to_dict())
    whole = [r for r in rows if r["bin_percent"] == 100]
    summary = {"whole_population": [{k: r[k] for k in ("seed", "method", "spearman", "common_ratio", "avg_cost_units")} for r in whole]}
    _write_manifest(out, cfg, "rank_compare", summary, [bins, evals.path, proxies.path], taus)
    return bins


def run_time_to_threshold(cfg: ExperimentConfig) -> Path:
    out = _prepare(cfg)
    pool = resolve_pool(cfg)
    gt = load_ground_truth(cfg, pool)
    ds = experiment_dataset(cfg.dataset, cfg.macro)
    taus = resolve_taus(cfg, ds, out)
    evals = JsonlStore(out / "evals.jsonl", ("method", "arch", "seed"), _header(cfg, "time_to_threshold"))
    jobs = [(arch, seed) for seed in cfg.seeds for arch in pool]
    with JobRunner(cfg, ds, taus) as runner:
        _fill(evals, runner, stage1_job, jobs, [("stage1", a, s) for a, s in jobs])
    evals.compact()

    rows = []
    per_seed: dict[str, float | None] = {}
    for seed in cfg.seeds:
        seed_rows = []
        for arch in pool:
            r = evals.get(("stage1", arch, seed))
            if r is None or r["stop_reason"] == STOP_NON_FINITE:
                continue
            seed_rows.append(
                {
                    "seed": seed,
                    "arch": arch,
                    "arch_str": _describe(arch),
                    "epochs_to_threshold": r["epochs_stage1"],
                    "cost_units": r["stage1_cost"],
                    "reached_threshold": r["reached_threshold"],
                    "timeout": r["stop_reason"] == STOP_MAX_EPOCHS,
                    "gt_accuracy": gt.get(arch),
                }
            )
        rows.extend(seed_rows)
        if len(seed_rows) >= 2:
            per_seed[str(seed)] = spearman([r["epochs_to_threshold"] for r in seed_rows], [r["gt_accuracy"] for r in seed_rows])
    columns = ("seed", "arch", "arch_str", "epochs_to_threshold", "cost_units", "reached_threshold", "timeout", "gt_accuracy")
    path = write_csv(out / "time_to_threshold.csv", columns, rows, cfg.to_dict())
    _write_manifest(out, cfg, "time_to_threshold", {"spearman_epochs_vs_gt": per_seed}, [path, evals.path], taus)
    return path


def run_zero_cost_over_epochs(cfg: ExperimentConfig) -> Path:
    out = _prepare(cfg)
    pool = resolve_pool(cfg)
    gt = load_ground_truth(cfg, pool)
    ds = experiment_dataset(cfg.dataset, cfg.macro)
    proxies = JsonlStore(out / "proxies.jsonl", ("kind", "arch", "seed", "epoch"), _header(cfg, "zero_cost_over_epochs"))
    epochs = cfg.zero_cost.epochs
    with JobRunner(cfg, ds, {}) as runner:
        _fill_proxies(proxies, runner, cfg, pool, epochs)
    proxies.compact()

    rows = []
    for seed in cfg.seeds:
        for epoch in range(epochs + 1):
            table = _proxy_scores(proxies.records(), seed, epoch)
            for kind in cfg.zero_cost.kinds:
                scores = table.get(kind, {"score": {}})["score"]
                archs = [a for a in pool if a in scores]
                rho = spearman([gt[a] for a in archs], [scores[a] for a in archs]) if len(archs) >= 2 else None
                rows.append({"seed": seed, "proxy": kind, "epoch": epoch, "spearman": rho, "n": len(archs)})
    path = write_csv(out / "zc_epochs.csv", ("seed", "proxy", "epoch", "spearman", "n"), rows, cfg.to_dict())
    _write_manifest(out, cfg, "zero_cost_over_epochs", {"rows": len(rows)}, [path, proxies.path])
    return path


def run_synthetic_zero_cost(cfg: ExperimentConfig) -> Path:
    """Ground truth, proxies and FEAR on the Gaussian synthetic dataset."""
    out = _prepare(cfg)
    synth = replace(cfg, dataset=replace(cfg.dataset, source="synthetic", paths=(), test_paths=()), ground_truth_dir=str(out))
    run_ground_truth_build(synth)
    pool = resolve_pool(synth)
    gt = load_ground_truth(synth, pool)
    ds = experiment_dataset(synth.dataset, synth.macro)
    taus = resolve_taus(synth, ds, out)
    evals = JsonlStore(out / "evals.jsonl", ("method", "arch", "seed"), _header(synth, "synthetic_zero_cost"))
    proxies = JsonlStore(out / "proxies.jsonl", ("kind", "arch", "seed", "epoch"), _header(synth, "synthetic_zero_cost"))
    with JobRunner(synth, ds, taus) as runner:
        jobs = [(arch, seed) for seed in synth.seeds for arch in pool]
        _fill(evals, runner, fear_job, jobs, [("fear", a, s) for a, s in jobs])
        _fill_proxies(proxies, runner, synth, pool, 0)
    evals.compact()
    proxies.compact()

    rows = []
    for seed in synth.seeds:
        table = _method_scores(evals.records(), seed)
        table.update(_proxy_scores(proxies.records(), seed, 0))
        for method in sorted(table):
            entry = table[method]
            archs = [a for a in pool if a in entry["score"]]
            rho = spearman([gt[a] for a in archs], [entry["score"][a] for a in archs]) if len(archs) >= 2 else None
            rows.append(
                {
                    "seed": seed,
                    "method": method,
                    "spearman": rho,
                    "avg_cost_units": float(np.mean([entry["cost"][a] for a in archs])) if archs else None,
                    "avg_wall_ms": float(np.mean([entry["wall"][a] for a in archs])) if archs else None,
                    "n": len(archs),
                }
            )
    comparison = _synflow_against_reference(cfg, out, pool, proxies.records())
    rows.extend(comparison)
    columns = ("seed", "method", "spearman", "avg_cost_units", "avg_wall_ms", "n")
    path = write_csv(out / "synthetic_zc.csv", columns, rows, synth.to_dict())
    summary: dict[str, Any] = {"rows": len(rows)}
    if comparison:
        synthetic = {r["seed"]: r["spearman"] for r in rows if r["method"] == "synflow"}
        summary["synflow_synthetic_vs_reference"] = {
            str(r["seed"]): {
                "synthetic": synthetic.get(r["seed"]),
                "reference": r["spearman"],
                "synthetic_not_above_reference": _not_above(synthetic.get(r["seed"]), r["spearman"]),
            }
            for r in comparison
        }
    _write_manifest(out, synth, "synthetic_zero_cost", summary, [path, evals.path, proxies.path], taus)
    return path


def _not_above(synthetic: float | None, reference: float | None) -> bool | None:
    if synthetic is None or reference is None:
        return None
    return synthetic <= reference


def _synflow_against_reference(
    cfg: ExperimentConfig, out: Path, pool: Sequence[int], records: Iterable[dict[str, Any]]
) -> list[dict[str, Any]]:
    """synflow ranked against the configured dataset's ground truth.

    synflow never reads pixels, so the scores computed here at the same
    macro and seed are the scores the reference data would give.
    """
    store = cfg.gt_dir / GROUND_TRUTH_FILE
    if cfg.gt_dir.resolve() == out.resolve() or not store.exists():
        logger.info("synflow_reference_skipped | ground_truth=%s", store)
        return []
    reference_gt = load_ground_truth(cfg, pool)
    rows = []
    for seed in cfg.seeds:
        entry = _proxy_scores(records, seed, 0).get("synflow")
        if entry is None:
            continue
        archs = [a for a in pool if a in entry["score"]]
        rho = spearman([reference_gt[a] for a in archs], [entry["score"][a] for a in archs]) if len(archs) >= 2 else None
        rows.append(
            {
                "seed": seed,
                "method": "synflow_reference_data",
                "spearman": rho,
                "avg_cost_units": float(np.mean([entry["cost"][a] for a in archs])) if archs else None,
                "avg_wall_ms": float(np.mean([entry["wall"][a] for a in archs])) if archs else None,
                "n": len(archs),
            }
        )
    return rows


class _CachedSearchMap:
    """``map_fn`` for searches: outcomes are cached per (method, arch, seed,
    budget) so a rerun repeats no training; misses go to the worker pool."""

    def __init__(self, runner: JobRunner, store: JsonlStore, method: str, seed: int) -> None:
        self.runner = runner
        self.store = store
        self.method = method
        self.seed = seed

    def _key(self, arch: int, fastest: float) -> tuple[Any, ...]:
        return (self.method, arch, self.seed, None if math.isinf(fastest) else fastest)

    def __call__(self, fn: Callable[..., Any], archs: Iterable[int], budgets: Iterable[float]) -> list[EvalOutcome]:
        archs, budgets = list(archs), list(budgets)
        missing = [(a, b) for a, b in zip(archs, budgets) if self._key(a, b) not in self.store]
        unique = list(dict.fromkeys(missing))
        if unique:
            results = self.runner.map(fn, [a for a, _ in unique], [b for _, b in unique])
            for (arch, fastest), result in zip(unique, results):
                self.store.append({**result, "method": self.method, "budget": self._key(arch, fastest)[3]})
        return [EvalOutcome.from_dict(self.store.get(self._key(a, b))) for a, b in zip(archs, budgets)]


def _best_gt(store: JsonlStore, arch: int, seed: int) -> float | None:
    record = store.get((arch, seed))
    return None if record is None else record["test_accuracy"]


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def run_random_search_compare(cfg: ExperimentConfig) -> Path:
    out = _prepare(cfg)
    ds = experiment_dataset(cfg.dataset, cfg.macro)
    taus = resolve_taus(cfg, ds, out)
    evals = JsonlStore(out / "search_evals.jsonl", ("method", "arch", "seed", "budget"), _header(cfg, "random_search_compare"))
    cfg.gt_dir.mkdir(parents=True, exist_ok=True)
    gt_store = JsonlStore(cfg.gt_dir / GROUND_TRUTH_FILE, ("arch", "seed"), _ground_truth_header(cfg))

    rows: list[dict[str, Any]] = []
    trace_rows: list[dict[str, Any]] = []
    replay: dict[str, Any] = {}
    with JobRunner(cfg, ds, taus) as runner:
        for seed in cfg.seeds:
            ctx = _context(seed)
            scfg = replace(cfg.search, seed=seed)
            fear_map = _CachedSearchMap(runner, evals, "fear", seed)
            fcfg = _fear_cfg(seed)
            results: list[tuple[str, int, SearchTrace]] = []
            best, trace = random_search_fear(
                ctx, fcfg, scfg, evaluate=partial(search_fear_job, seed=seed), map_fn=fear_map
            )
            results.append(("rs_fear", best, trace))
            best, trace = random_search_shortreg(
                ctx,
                scfg,
                cfg.shortreg.score_metric,
                evaluate=partial(search_shortreg_job, seed=seed),
                map_fn=_CachedSearchMap(runner, evals, "shortreg", seed),
            )
            results.append(("rs_shortreg", best, trace))

            if scfg.verify_replay:
                _, free = random_search_fear(
                    ctx, fcfg, scfg, use_budget=False, evaluate=partial(search_fear_job, seed=seed), map_fn=fear_map
                )
                unbudgeted = {arch: EvalOutcome.from_dict(evals.get(("fear", arch, seed, None))) for arch in free.archs}
                predicted = replay_search(
                    free.archs, unbudgeted, scfg.reject_ratio, scfg.fastest_update_mode, scfg.parallel_jobs
                )
                fear_trace = results[0][2]
                match = (
                    predicted.rejected_indices == fear_trace.rejected_indices
                    and predicted.fastest_trajectory == fear_trace.fastest_trajectory
                )
                if not match:
                    logger.warning("replay_mismatch | seed=%d", seed)
                replay[str(seed)] = {"match": match, "unbudgeted_cost_units": free.total_cost}

            pending = sorted({(best_arch, seed) for _, best_arch, _ in results})
            _fill(gt_store, runner, gt_job, pending, pending)
            for method, best_arch, trace in results:
                rows.append(
                    {
                        "seed": seed,
                        "method": method,
                        "best_arch": best_arch,
                        "best_arch_str": _describe(best_arch),
                        "best_score": trace.records[-1].best_score,
                        "best_gt_accuracy": _best_gt(gt_store, best_arch, seed),
                        "total_cost_units": trace.total_cost,
                        "total_wall_ms": trace.total_wall_ms,
                        "evaluated": len(trace.records),
                        "rejected": len(trace.rejected_indices),
                    }
                )
                trace_rows.extend({"method": method, "seed": seed, "mode": trace.mode, **r.to_dict()} for r in trace.records)
    evals.compact()
    gt_store.compact()

    summary: dict[str, Any] = {"replay": replay}
    for method in ("rs_fear", "rs_shortreg"):
        mine = [r for r in rows if r["method"] == method]
        acc_mean, acc_std = _mean_std([r["best_gt_accuracy"] for r in mine if r["best_gt_accuracy"] is not None])
        cost_mean, cost_std = _mean_std([float(r["total_cost_units"]) for r in mine])
        summary[method] = {"best_gt_mean": acc_mean, "best_gt_std": acc_std, "cost_mean": cost_mean, "cost_std": cost_std}
    fear_cost = summary["rs_fear"]["cost_mean"]
    summary["cost_ratio_shortreg_over_fear"] = summary["rs_shortreg"]["cost_mean"] / fear_cost if fear_cost else None

    columns = (
        "seed",
        "method",
        "best_arch",
        "best_arch_str",
        "best_score",
        "best_gt_accuracy",
        "total_cost_units",
        "total_wall_ms",
        "evaluated",
        "rejected",
    )
    path = write_csv(out / "search_compare.csv", columns, rows, cfg.to_dict())
    trace_path = write_jsonl(out / "trace.jsonl", _header(cfg, "random_search_compare"), trace_rows)
    _write_manifest(out, cfg, "random_search_compare", summary, [path, trace_path, evals.path], taus)
    logger.info("search_compare_done | cost_ratio=%s", summary["cost_ratio_shortreg_over_fear"])
    return path


def _float(value: str) -> float | None:
    return None if value in ("", None) else float(value)


def run_plot_data(cfg: ExperimentConfig) -> Path:
    """Pareto frontier of shortreg settings and the nearest-cost comparison
    against FEAR, from a finished rank-compare run."""
    out = Path(cfg.output_dir)
    bins_path = out / "bins.csv"
    if not bins_path.exists():
        raise ConfigError(f"{bins_path} not found; run rank-compare first", path=str(bins_path))
    _, raw = read_csv(bins_path)
    rows = [
        {**r, "seed": int(r["seed"]), "bin_percent": int(r["bin_percent"]), "spearman": _float(r["spearman"]),
         "common_ratio": _float(r["common_ratio"]), "avg_cost_units": _float(r["avg_cost_units"])}
        for r in raw
    ]

    pareto_rows: list[dict[str, Any]] = []
    nearest_rows: list[dict[str, Any]] = []
    for seed in sorted({r["seed"] for r in rows}):
        for percent in sorted({r["bin_percent"] for r in rows}):
            cell = [r for r in rows if r["seed"] == seed and r["bin_percent"] == percent]
            short = [r for r in cell if r["method"].startswith("shortreg") and r["spearman"] is not None]
            points = [(r["avg_cost_units"], r["spearman"]) for r in short]
            frontier = set(pareto_indices(points))
            for i, r in enumerate(short):
                pareto_rows.append(
                    {
                        "seed": seed,
                        "bin_percent": percent,
                        "method": r["method"],
                        "avg_cost_units": r["avg_cost_units"],
                        "spearman": r["spearman"],
                        "on_frontier": i in frontier,
                    }
                )
            fear = next((r for r in cell if r["method"] == "fear"), None)
            if fear is None or not frontier:
                continue
            front = sorted(frontier)
            pick = short[front[nearest_by_cost([points[i] for i in front], fear["avg_cost_units"])]]
            nearest_rows.append(
                {
                    "seed": seed,
                    "bin_percent": percent,
                    "fear_spearman": fear["spearman"],
                    "fear_common_ratio": fear["common_ratio"],
                    "fear_avg_cost_units": fear["avg_cost_units"],
                    "shortreg_method": pick["method"],
                    "shortreg_spearman": pick["spearman"],
                    "shortreg_common_ratio": pick["common_ratio"],
                    "shortreg_avg_cost_units": pick["avg_cost_units"],
                }
            )
    pareto = write_csv(
        out / "pareto.csv",
        ("seed", "bin_percent", "method", "avg_cost_units", "spearman", "on_frontier"),
        pareto_rows,
        cfg.to_dict(),
    )
    nearest = write_csv(
        out / "nearest_frontier.csv",
        (
            "seed",
            "bin_percent",
            "fear_spearman",
            "fear_common_ratio",
            "fear_avg_cost_units",
            "shortreg_method",
            "shortreg_spearman",
            "shortreg_common_ratio",
            "shortreg_avg_cost_units",
        ),
        nearest_rows,
        cfg.to_dict(),
    )
    logger.info("plot_data_done | pareto_rows=%d nearest_rows=%d", len(pareto_rows), len(nearest_rows))
    return pareto


RUNNERS: dict[str, Callable[[ExperimentConfig], Any]] = {
    "ground_truth_build": run_ground_truth_build,
    "rank_compare": run_rank_compare,
    "time_to_threshold": run_time_to_threshold,
    "zero_cost_over_epochs": run_zero_cost_over_epochs,
    "synthetic_zero_cost": run_synthetic_zero_cost,
    "random_search_compare": run_random_search_compare,
}


def run_experiment(cfg: ExperimentConfig) -> Any:
    return RUNNERS[cfg.kind](cfg)
