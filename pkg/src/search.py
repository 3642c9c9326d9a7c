"""Random search with FEAR and early rejection, and the shortreg control.

Jobs run in windows of ``parallel_jobs``. Every job in a window sees the
fastest time-to-threshold as it stood when the window opened, and results
are folded into the running best/fastest in stream order, so a trace
depends only on the seed and the window size, never on scheduling.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import partial
import math
from typing import Any, Callable, Iterable, Mapping, Sequence

from src.config import FearConfig, SearchConfig
from src.errors import NoSurvivorError
from src.evaluators import EvalContext, EvalOutcome, fear_evaluate, shortreg_evaluate
from src.logger import get_logger
from src.rng import stream
from src.search_space import sample_archs

logger = get_logger("search")

Evaluate = Callable[[int, float], EvalOutcome]
MapFn = Callable[..., Iterable[EvalOutcome]]


@dataclass(frozen=True)
class SearchRecord:
    index: int
    arch: int
    score: float | None
    rejected: bool
    stop_reason: str
    cost_units: int
    stage1_cost: int
    wall_ms: int
    # fastest time-to-threshold the job was budgeted against (None = unbounded)
    budget_fastest: float | None
    best_arch: int | None
    best_score: float | None
    fastest_so_far: float | None
    cumulative_cost: int
    started_at: int
    completed_at: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class SearchTrace:
    method: str
    mode: str
    records: list[SearchRecord] = field(default_factory=list)

    @property
    def total_cost(self) -> int:
        return self.records[-1].cumulative_cost if self.records else 0

    @property
    def total_wall_ms(self) -> int:
        return sum(r.wall_ms for r in self.records)

    @property
    def archs(self) -> list[int]:
        return [r.arch for r in self.records]

    @property
    def rejected_indices(self) -> list[int]:
        return [r.index for r in self.records if r.rejected]

    @property
    def fastest_trajectory(self) -> list[float | None]:
        return [r.fastest_so_far for r in self.records]

    @property
    def best(self) -> int | None:
        return self.records[-1].best_arch if self.records else None


def _none_if_inf(value: float) -> float | None:
    return None if math.isinf(value) else value


def sample_stream(seed: int, budget: int) -> list[int]:
    """The architecture stream shared by every search method for a seed."""
    return sample_archs(stream(seed, "search.sample"), budget)


def run_search(
    method: str,
    archs: Sequence[int],
    evaluate: Evaluate,
    *,
    use_budget: bool,
    fastest_update_mode: str = "as_printed",
    parallel_jobs: int = 1,
    map_fn: MapFn = map,
) -> tuple[int, SearchTrace]:
    """Evaluate ``archs`` in order, tracking the best score and the fastest
    time-to-threshold.

    ``as_printed`` tightens the fastest time only when a job also improves
    the best score; ``all_completed`` tightens it on every job that reached
    the threshold.
    """
    trace = SearchTrace(method=method, mode=fastest_update_mode)
    fastest = math.inf
    best_arch: int | None = None
    best_score = -math.inf
    cumulative = 0
    for start in range(0, len(archs), parallel_jobs):
        window = list(archs[start : start + parallel_jobs])
        budget = fastest if use_budget else math.inf
        outcomes = list(map_fn(evaluate, window, [budget] * len(window)))
        for offset, (arch, outcome) in enumerate(zip(window, outcomes)):
            index = start + offset
            cumulative += outcome.cost_units
            completed = not outcome.rejected_early
            if completed:
                improved = outcome.score > best_score
                if improved:
                    best_arch, best_score = arch, outcome.score
                reached = outcome.reached_threshold
                if reached and (improved or fastest_update_mode == "all_completed"):
                    fastest = min(fastest, float(outcome.stage1_cost))
            trace.records.append(
                SearchRecord(
                    index=index,
                    arch=arch,
                    score=outcome.score,
                    rejected=outcome.rejected_early,
                    stop_reason=outcome.stop_reason,
                    cost_units=outcome.cost_units,
                    stage1_cost=outcome.stage1_cost,
                    wall_ms=outcome.wall_ms,
                    budget_fastest=_none_if_inf(budget),
                    best_arch=best_arch,
                    best_score=None if best_arch is None else best_score,
                    fastest_so_far=_none_if_inf(fastest),
                    cumulative_cost=cumulative,
                    started_at=start,
                    completed_at=index,
                )
            )
        logger.debug("search_window | method=%s start=%d fastest=%s best=%s", method, start, fastest, best_arch)
    if best_arch is None:
        raise NoSurvivorError(f"{method}: all {len(archs)} evaluations were rejected", budget=len(archs))
    logger.info(
        "search_done | method=%s best=%d score=%.4f rejected=%d cost=%d",
        method,
        best_arch,
        best_score,
        len(trace.rejected_indices),
        cumulative,
    )
    return best_arch, trace


def _fear_job(ctx: EvalContext, fcfg: FearConfig, arch: int, fastest: float) -> EvalOutcome:
    return fear_evaluate(arch, ctx, fcfg, fastest)


def _shortreg_job(ctx: EvalContext, epochs: int, batch: int, metric: str, arch: int, fastest: float) -> EvalOutcome:
    return shortreg_evaluate(arch, ctx, epochs, batch, metric)


def random_search_fear(
    ctx: EvalContext,
    fcfg: FearConfig,
    scfg: SearchConfig,
    *,
    use_budget: bool = True,
    evaluate: Evaluate | None = None,
    map_fn: MapFn = map,
) -> tuple[int, SearchTrace]:
    """Sample ``budget`` archs uniformly; cap each stage 1 at
    ``reject_ratio`` times the fastest time-to-threshold so far."""
    fcfg = FearConfig(**{**asdict(fcfg), "reject_ratio": scfg.reject_ratio})
    archs = sample_stream(scfg.seed, scfg.budget)
    job = evaluate or partial(_fear_job, ctx, fcfg)
    return run_search(
        "rs_fear" if use_budget else "rs_fear_unbudgeted",
        archs,
        job,
        use_budget=use_budget,
        fastest_update_mode=scfg.fastest_update_mode,
        parallel_jobs=scfg.parallel_jobs,
        map_fn=map_fn,
    )


def random_search_shortreg(
    ctx: EvalContext,
    scfg: SearchConfig,
    score_metric: str = "train_accuracy",
    *,
    evaluate: Evaluate | None = None,
    map_fn: MapFn = map,
) -> tuple[int, SearchTrace]:
    archs = sample_stream(scfg.seed, scfg.budget)
    job = evaluate or partial(_shortreg_job, ctx, scfg.shortreg_epochs, scfg.shortreg_batch, score_metric)
    return run_search(
        "rs_shortreg",
        archs,
        job,
        use_budget=False,
        fastest_update_mode=scfg.fastest_update_mode,
        parallel_jobs=scfg.parallel_jobs,
        map_fn=map_fn,
    )


@dataclass(frozen=True)
class ReplayPrediction:
    rejected_indices: list[int]
    fastest_trajectory: list[float | None]
    best_arch: int | None


def replay_search(
    archs: Sequence[int],
    unbudgeted: Mapping[int, EvalOutcome],
    reject_ratio: float,
    fastest_update_mode: str = "as_printed",
    parallel_jobs: int = 1,
) -> ReplayPrediction:
    """Predict a budgeted search from unbudgeted outcomes.

    Cumulative stage-1 cost only grows, so a job is rejected exactly when its
    unbudgeted time-to-threshold exceeds ``floor(reject_ratio * fastest)``.
    """
    fastest = math.inf
    best_arch: int | None = None
    best_score = -math.inf
    rejected: list[int] = []
    trajectory: list[float | None] = []
    for start in range(0, len(archs), parallel_jobs):
        window_budget = fastest
        for index in range(start, min(start + parallel_jobs, len(archs))):
            outcome = unbudgeted[archs[index]]
            cap = math.inf if math.isinf(window_budget) else math.floor(reject_ratio * window_budget)
            if outcome.rejected_early or outcome.stage1_cost > cap:
                rejected.append(index)
            else:
                improved = outcome.score > best_score
                if improved:
                    best_arch, best_score = archs[index], outcome.score
                if outcome.reached_threshold and (improved or fastest_update_mode == "all_completed"):
                    fastest = min(fastest, float(outcome.stage1_cost))
            trajectory.append(_none_if_inf(fastest))
    return ReplayPrediction(rejected_indices=rejected, fastest_trajectory=trajectory, best_arch=best_arch)
