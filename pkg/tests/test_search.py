from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import chisquare

from src.config import SPACE_SIZE, FearConfig, MacroConfig, SearchConfig, SgdConfig, SyntheticConfig
from src.datasets import generate_synthetic, normalize
from src.errors import NoSurvivorError
from src.evaluators import STOP_COST_CAP, STOP_NON_FINITE, STOP_THRESHOLD, EvalContext, EvalOutcome, fear_evaluate
from src.search import random_search_fear, random_search_shortreg, replay_search, run_search, sample_stream
from src.search_space import CellSpec, OpKind, decode, encode, sample_archs

RATIO = 4.0


def _mk_outcome(arch: int, cost: int, score: float | None, reason: str = STOP_THRESHOLD) -> EvalOutcome:
    rejected = score is None
    return EvalOutcome(
        arch=arch,
        method="fear",
        seed=0,
        reached_threshold=reason == STOP_THRESHOLD,
        score=score,
        cost_units=cost + (0 if rejected else 5),
        wall_ms=0,
        epochs_stage1=1,
        epochs_stage2=0 if rejected else 1,
        rejected_early=rejected,
        stop_reason=reason,
        stage1_cost=cost,
    )


def _mk_evaluate(table: dict[int, tuple[int, float | None]]):
    """Budgeted FEAR stand-in: rejected once stage-1 cost passes floor(RATIO * fastest)."""

    def evaluate(arch: int, fastest: float) -> EvalOutcome:
        cost, score = table[arch]
        if score is None:
            return _mk_outcome(arch, cost, None, STOP_NON_FINITE)
        if math.isfinite(fastest) and cost > math.floor(RATIO * fastest):
            return _mk_outcome(arch, math.floor(RATIO * fastest) + 1, None, STOP_COST_CAP)
        return _mk_outcome(arch, cost, score)

    return evaluate


def _unbudgeted(table, archs) -> dict[int, EvalOutcome]:
    evaluate = _mk_evaluate(table)
    return {arch: evaluate(arch, math.inf) for arch in archs}


TABLE = {0: (100, 0.5), 1: (50, 0.4), 2: (450, 0.9), 3: (300, 0.6)}


def test_as_printed_updates_fastest_only_on_improvement() -> None:
    best, trace = run_search("rs_fear", [0, 1, 2, 3], _mk_evaluate(TABLE), use_budget=True)
    assert best == 3
    assert trace.rejected_indices == [2]
    assert trace.fastest_trajectory == [100.0, 100.0, 100.0, 100.0]
    assert trace.records[2].budget_fastest == 100.0
    assert trace.records[0].budget_fastest is None


def test_all_completed_updates_fastest_every_time() -> None:
    best, trace = run_search(
        "rs_fear", [0, 1, 2, 3], _mk_evaluate(TABLE), use_budget=True, fastest_update_mode="all_completed"
    )
    assert best == 0
    assert trace.rejected_indices == [2, 3]
    assert trace.fastest_trajectory == [100.0, 50.0, 50.0, 50.0]


def test_unbudgeted_search_never_rejects_on_cost() -> None:
    best, trace = run_search("rs_fear", [0, 1, 2, 3], _mk_evaluate(TABLE), use_budget=False)
    assert best == 2
    assert trace.rejected_indices == []
    assert trace.total_cost == sum(c + 5 for c, _ in TABLE.values())


def test_window_shares_the_opening_budget() -> None:
    calls: list[tuple[list[int], list[float]]] = []

    def recording_map(fn, archs, budgets):
        archs, budgets = list(archs), list(budgets)
        calls.append((archs, budgets))
        return [fn(a, b) for a, b in zip(archs, budgets)]

    _, trace = run_search(
        "rs_fear", [0, 1, 2, 3], _mk_evaluate(TABLE), use_budget=True, parallel_jobs=3, map_fn=recording_map
    )
    assert [c[0] for c in calls] == [[0, 1, 2], [3]]
    assert calls[0][1] == [math.inf] * 3
    assert calls[1][1] == [100.0]
    assert trace.rejected_indices == []
    assert [r.started_at for r in trace.records] == [0, 0, 0, 3]


@pytest.mark.parametrize("mode", ["as_printed", "all_completed"])
@pytest.mark.parametrize("jobs", [1, 3])
def test_replay_predicts_budgeted_search(mode: str, jobs: int) -> None:
    rng = np.random.default_rng(0)
    for trial in range(20):
        archs = [int(a) for a in rng.choice(1000, size=30, replace=False)]
        table = {}
        for arch in archs:
            score = None if rng.random() < 0.05 else float(rng.random())
            table[arch] = (int(rng.integers(10, 400)), score)
        table[archs[0]] = (int(rng.integers(10, 400)), 0.5)
        best, trace = run_search(
            "rs_fear", archs, _mk_evaluate(table), use_budget=True, fastest_update_mode=mode, parallel_jobs=jobs
        )
        predicted = replay_search(archs, _unbudgeted(table, archs), RATIO, mode, jobs)
        assert predicted.rejected_indices == trace.rejected_indices, trial
        assert predicted.fastest_trajectory == trace.fastest_trajectory, trial
        assert predicted.best_arch == best


def test_all_rejected_raises() -> None:
    table = {1: (10, None), 2: (20, None)}
    with pytest.raises(NoSurvivorError):
        run_search("rs_fear", [1, 2], _mk_evaluate(table), use_budget=True)


def test_sample_stream_is_seeded() -> None:
    assert sample_stream(0, 50) == sample_stream(0, 50)
    assert sample_stream(0, 50) != sample_stream(1, 50)


def _mk_ctx() -> EvalContext:
    ds = normalize(generate_synthetic(SyntheticConfig(n_total=64, n_train=48, hw=8, num_classes=4, num_labelers=4), 0))
    macro = MacroConfig(stages=2, cells_per_stage=1, init_channels=4, num_classes=4, image_hw=8)
    return EvalContext(ds=ds, macro=macro, sgd=SgdConfig(), seed=0, horizon_epochs=4)


def _mk_fear(**overrides) -> FearConfig:
    kwargs = {"tau": 0.01, "stage2_epochs": 1, "stage1_max_epochs": 2, "batch": 16}
    kwargs.update(overrides)
    return FearConfig(**kwargs)


def test_sample_archs_is_uniform() -> None:
    draws = np.array(sample_archs(np.random.default_rng(11), 10_000))
    assert draws.min() >= 0 and draws.max() < SPACE_SIZE
    # 25 equal-width id ranges, then each edge's op marginal
    assert chisquare(np.bincount(draws // (SPACE_SIZE // 25), minlength=25)).pvalue > 1e-4
    ops = np.array([decode(int(a)).edge_ops for a in draws], dtype=np.int64)
    for edge in range(ops.shape[1]):
        assert chisquare(np.bincount(ops[:, edge], minlength=5)).pvalue > 1e-4


def test_budget_of_one_returns_the_sampled_arch() -> None:
    scfg = SearchConfig(budget=1, seed=3)
    table = {arch: (100, 0.5) for arch in sample_stream(3, 1)}
    best, trace = random_search_fear(None, _mk_fear(), scfg, evaluate=_mk_evaluate(table))
    assert best == sample_stream(3, 1)[0]
    assert trace.archs == [best]
    best, trace = random_search_shortreg(None, scfg, evaluate=_mk_evaluate(table))
    assert best == sample_stream(3, 1)[0]


def test_rejection_is_monotone_in_budget_and_matches_replay() -> None:
    ctx = _mk_ctx()
    cheap = encode(CellSpec.uniform(OpKind.ZEROIZE))
    costly = encode(CellSpec.uniform(OpKind.CONV3X3))
    free = {arch: fear_evaluate(arch, ctx, _mk_fear()) for arch in (cheap, costly)}
    assert free[cheap].reached_threshold
    spread = free[costly].stage1_cost / free[cheap].stage1_cost
    assert spread > 2.0

    ratios = sorted(r for r in (spread * 0.5, spread * 0.9, spread * 1.1, spread * 2.0) if r > 1.0)
    flags = []
    for ratio in ratios:
        fcfg = _mk_fear(reject_ratio=ratio)
        _, trace = run_search(
            "rs_fear",
            [cheap, costly],
            lambda arch, fastest, fcfg=fcfg: fear_evaluate(arch, ctx, fcfg, fastest),
            use_budget=True,
        )
        predicted = replay_search([cheap, costly], free, ratio)
        assert predicted.rejected_indices == trace.rejected_indices
        flags.append(1 in trace.rejected_indices)
    # rejected under a budget means rejected under every smaller one
    assert flags == sorted(flags, reverse=True)
    assert flags[0] and not flags[-1]


def test_same_seed_gives_identical_traces() -> None:
    scfg = SearchConfig(budget=3, seed=5, shortreg_epochs=1, shortreg_batch=16)

    def records(trace) -> list[dict]:
        return [{k: v for k, v in r.to_dict().items() if k != "wall_ms"} for r in trace.records]

    runs = [random_search_fear(_mk_ctx(), _mk_fear(), scfg) for _ in range(2)]
    assert runs[0][0] == runs[1][0]
    assert records(runs[0][1]) == records(runs[1][1])
    runs = [random_search_shortreg(_mk_ctx(), scfg) for _ in range(2)]
    assert runs[0][0] == runs[1][0]
    assert records(runs[0][1]) == records(runs[1][1])
