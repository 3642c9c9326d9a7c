from __future__ import annotations

from dataclasses import asdict, dataclass
import itertools
import math
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from src.config import BIN_PERCENTS
from src.errors import DomainError


@dataclass(frozen=True)
class BinReport:
    method: str
    bin_percent: int
    spearman: float | None
    common_ratio: float
    avg_cost_units: float
    avg_wall_ms: float
    n_in_bin: int
    n_failed: int = 0

    def to_dict(self) -> dict[str, object]:
        return asdict(self)


def spearman(a: Sequence[float], b: Sequence[float]) -> float | None:
    """Rank correlation with average ranks for ties; None when either side
    has no rank variance."""
    if len(a) != len(b):
        raise DomainError(f"length mismatch {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise DomainError("spearman needs at least two values")
    ra = rankdata(np.asarray(a, dtype=np.float64))
    rb = rankdata(np.asarray(b, dtype=np.float64))
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0.0:
        return None
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def top_k(scores: Mapping[int, float], k: int) -> list[int]:
    """Highest scores first, ties to the lower ArchId."""
    return sorted(scores, key=lambda arch: (-scores[arch], arch))[:k]


def bin_size(n: int, top_percent: float) -> int:
    k = math.ceil(top_percent / 100.0 * n - 1e-9)
    if k < 1:
        raise DomainError(f"top {top_percent}% of {n} is empty")
    return min(k, n)


def common_ratio(gt_scores: Mapping[int, float], method_scores: Mapping[int, float], top_percent: float) -> float:
    if set(gt_scores) != set(method_scores):
        raise DomainError("ground truth and method must score the same architectures")
    k = bin_size(len(gt_scores), top_percent)
    return len(set(top_k(gt_scores, k)) & set(top_k(method_scores, k))) / k


def bin_report(
    method: str,
    gt_scores: Mapping[int, float],
    method_scores: Mapping[int, float],
    costs: Mapping[int, float] | None = None,
    wall_ms: Mapping[int, float] | None = None,
    percents: Sequence[int] = BIN_PERCENTS,
) -> list[BinReport]:
    """Per cumulative ground-truth bin: spearman and common ratio restricted
    to bin members, and their mean cost.

    Architectures the method failed on are dropped from every bin and counted.
    """
    population = sorted(set(gt_scores) & set(method_scores))
    failed = len(set(gt_scores) - set(method_scores))
    if not population:
        raise DomainError(f"{method}: no architecture has both ground truth and a score")
    gt = {arch: gt_scores[arch] for arch in population}
    ms = {arch: method_scores[arch] for arch in population}
    ranked = top_k(gt, len(gt))
    rows = []
    for percent in percents:
        k = bin_size(len(ranked), percent)
        members = ranked[:k]
        rho = spearman([gt[a] for a in members], [ms[a] for a in members]) if k >= 2 else None
        rows.append(
            BinReport(
                method=method,
                bin_percent=int(percent),
                spearman=rho,
                common_ratio=len(set(members) & set(top_k(ms, k))) / k,
                avg_cost_units=float(np.mean([costs[a] for a in members])) if costs else 0.0,
                avg_wall_ms=float(np.mean([wall_ms[a] for a in members])) if wall_ms else 0.0,
                n_in_bin=k,
                n_failed=failed,
            )
        )
    return rows


def pareto_indices(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of (cost, quality) points no other point dominates, by cost."""
    order = sorted(range(len(points)), key=lambda i: (points[i][0], -points[i][1], i))
    keep: list[int] = []
    best_cheaper = -math.inf
    for _, group in itertools.groupby(order, key=lambda i: points[i][0]):
        members = list(group)
        top = points[members[0]][1]
        for i in members:
            if points[i][1] == top and top > best_cheaper:
                keep.append(i)
        best_cheaper = max(best_cheaper, top)
    return keep


def pareto_frontier(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    return [tuple(points[i]) for i in pareto_indices(points)]


def nearest_by_cost(points: Sequence[tuple[float, float]], cost: float) -> int:
    """Index of the point whose cost is closest to ``cost`` (cheaper on ties)."""
    if not points:
        raise DomainError("no points to choose from")
    return min(range(len(points)), key=lambda i: (abs(points[i][0] - cost), points[i][0], i))
