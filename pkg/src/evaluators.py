"""Training-based scoring of one architecture: FEAR, shortreg and the
full-training ground truth.

Every evaluation builds its own network from ``derive_seed(seed, "init", arch)``
and draws minibatch order from ``derive_seed(seed, "batches", arch)``, so the
three procedures share an initialisation and a data order for a given arch.
Compute is charged in deterministic cost units (see ``network.cost_units``);
wall time is recorded beside it and never used for decisions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
import math
import time
from typing import Any, Iterator

import numpy as np

from src.config import FearConfig, GroundTruthConfig, MacroConfig, SgdConfig
from src.datasets import ImageDataset
from src.errors import DomainError, NumericError
from src.logger import get_logger
from src.network import (
    Network,
    build_network,
    cost_units,
    forward_cost_units,
    param_fraction_up_to,
    snap_freeze_boundary,
)
from src.rng import derive_seed
from src.search_space import decode
from src.trainer import evaluate_accuracy, steps_per_epoch, train_epoch

logger = get_logger("evaluators")

STOP_THRESHOLD = "threshold"
STOP_COST_CAP = "cost_cap"
STOP_MAX_EPOCHS = "max_epochs"
STOP_NON_FINITE = "non_finite"
STOP_FIXED = "fixed_epochs"
REJECTING_STOPS = (STOP_COST_CAP, STOP_NON_FINITE)


@dataclass(frozen=True)
class EvalContext:
    """Everything an evaluation job needs besides the architecture."""

    ds: ImageDataset
    macro: MacroConfig
    sgd: SgdConfig
    seed: int
    # cosine horizon of regular training, shared by FEAR stage 1 and 2
    horizon_epochs: int

    def build(self, arch: int) -> Network:
        return build_network(decode(arch), self.macro, derive_seed(self.seed, "init", arch))

    def batch_rng(self, arch: int) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, "batches", arch))

    def schedule(self, epochs: int, batch: int) -> SgdConfig:
        total = max(1, epochs * steps_per_epoch(len(self.ds.train_idx), batch))
        return SgdConfig(
            lr_max=self.sgd.lr_max,
            lr_min=self.sgd.lr_min,
            weight_decay=self.sgd.weight_decay,
            momentum=self.sgd.momentum,
            nesterov=self.sgd.nesterov,
            total_steps=total,
        )


@dataclass(frozen=True)
class EvalOutcome:
    arch: int
    method: str
    seed: int
    reached_threshold: bool
    score: float | None
    cost_units: int
    wall_ms: int
    epochs_stage1: int
    epochs_stage2: int
    rejected_early: bool
    stop_reason: str
    stage1_cost: int = 0
    freeze_boundary: int | None = None
    frozen_fraction: float | None = None

    def __post_init__(self) -> None:
        if (self.score is None) != self.rejected_early:
            raise DomainError("score must be present exactly when the evaluation was not rejected", arch=self.arch)
        if self.cost_units <= 0:
            raise DomainError("cost_units must be positive", arch=self.arch)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EvalOutcome:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass(frozen=True)
class ThresholdRun:
    """Stage-1 result: training from scratch until the metric reaches tau."""

    reached: bool
    epochs: int
    cost: int
    metric: float | None
    stop_reason: str
    next_step: int


def _score(net: Network, ds: ImageDataset, metric: str, running_accuracy: float) -> tuple[float, int]:
    """Value of the score metric after an epoch and the cost of measuring it."""
    if metric == "train_accuracy":
        return running_accuracy, 0
    acc = evaluate_accuracy(net, ds.test_images, ds.test_labels)
    return acc, forward_cost_units(net, len(ds.test_idx))


def train_to_threshold(
    net: Network,
    ds: ImageDataset,
    tau: float,
    cost_cap: int | None,
    cfg: FearConfig,
    *,
    sgd: SgdConfig,
    rng: np.random.Generator,
) -> ThresholdRun:
    """Regular training, checked at epoch boundaries.

    The cap is tested before the threshold, so a run is rejected exactly when
    its cost to reach tau exceeds ``cost_cap``.
    """
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    images, labels = ds.train_images, ds.train_labels
    cost = 0
    step = 0
    metric: float | None = None
    for epoch in range(1, cfg.stage1_max_epochs + 1):
        try:
            result = train_epoch(net, images, labels, cfg.batch, rng, sgd, step)
            metric, extra = _score(net, ds, cfg.score_metric, result.accuracy)
        except NumericError as exc:
            logger.warning("stage1_non_finite | epoch=%d where=%s", epoch, exc.where)
            return ThresholdRun(False, epoch, max(cost, 1), None, STOP_NON_FINITE, step)
        step = result.next_step
        cost += cost_units(net, result.samples) + extra
        if cost_cap is not None and cost > cost_cap:
            return ThresholdRun(False, epoch, cost, metric, STOP_COST_CAP, step)
        if metric >= tau:
            return ThresholdRun(True, epoch, cost, metric, STOP_THRESHOLD, step)
    return ThresholdRun(False, cfg.stage1_max_epochs, cost, metric, STOP_MAX_EPOCHS, step)


def fear_evaluate(
    arch: int,
    ctx: EvalContext,
    fcfg: FearConfig,
    fastest_budget: float | None = None,
) -> EvalOutcome:
    """Train to threshold, freeze the parameter prefix covering
    ``freeze_fraction`` and train ``stage2_epochs`` more epochs.

    With a finite ``fastest_budget`` stage 1 is capped at
    ``reject_ratio * fastest_budget`` cost units.
    """
    started = time.perf_counter()
    net = ctx.build(arch)
    rng = ctx.batch_rng(arch)
    sgd = ctx.schedule(ctx.horizon_epochs, fcfg.batch)
    cap = None
    if fastest_budget is not None and math.isfinite(fastest_budget):
        cap = int(math.floor(fcfg.reject_ratio * fastest_budget))

    stage1 = train_to_threshold(net, ctx.ds, fcfg.tau, cap, fcfg, sgd=sgd, rng=rng)

    def outcome(**kw: Any) -> EvalOutcome:
        base = dict(
            arch=arch,
            method="fear",
            seed=ctx.seed,
            reached_threshold=stage1.reached,
            wall_ms=int((time.perf_counter() - started) * 1000),
            epochs_stage1=stage1.epochs,
            stage1_cost=stage1.cost,
        )
        base.update(kw)
        return EvalOutcome(**base)

    if stage1.stop_reason in REJECTING_STOPS:
        logger.info("fear_rejected | arch=%d reason=%s epochs=%d cost=%d", arch, stage1.stop_reason, stage1.epochs, stage1.cost)
        return outcome(
            score=None,
            cost_units=stage1.cost,
            epochs_stage2=0,
            rejected_early=True,
            stop_reason=stage1.stop_reason,
        )

    boundary = snap_freeze_boundary(net, fcfg.freeze_fraction)
    fraction = param_fraction_up_to(net, boundary)
    net.freeze_prefix(boundary)
    score = stage1.metric
    cost = stage1.cost
    step = stage1.next_step
    for epoch in range(1, fcfg.stage2_epochs + 1):
        try:
            result = train_epoch(net, ctx.ds.train_images, ctx.ds.train_labels, fcfg.batch, rng, sgd, step)
            score, extra = _score(net, ctx.ds, fcfg.score_metric, result.accuracy)
        except NumericError as exc:
            logger.warning("stage2_non_finite | arch=%d epoch=%d where=%s", arch, epoch, exc.where)
            return outcome(
                score=None,
                cost_units=cost,
                epochs_stage2=epoch,
                rejected_early=True,
                stop_reason=STOP_NON_FINITE,
                freeze_boundary=boundary,
                frozen_fraction=fraction,
            )
        step = result.next_step
        cost += cost_units(net, result.samples) + extra

    logger.info(
        "fear_done | arch=%d reached=%s epochs1=%d boundary=%d frozen=%.3f score=%.4f cost=%d",
        arch,
        stage1.reached,
        stage1.epochs,
        boundary,
        fraction,
        score,
        cost,
    )
    return outcome(
        score=float(score),
        cost_units=cost,
        epochs_stage2=fcfg.stage2_epochs,
        rejected_early=False,
        stop_reason=stage1.stop_reason,
        freeze_boundary=boundary,
        frozen_fraction=fraction,
    )


def shortreg_evaluate(
    arch: int,
    ctx: EvalContext,
    epochs: int,
    batch: int,
    score_metric: str = "train_accuracy",
) -> EvalOutcome:
    """Plain training for a fixed number of epochs on its own cosine schedule."""
    if epochs < 1:
        raise DomainError("shortreg needs at least one epoch")
    started = time.perf_counter()
    net = ctx.build(arch)
    rng = ctx.batch_rng(arch)
    sgd = ctx.schedule(epochs, batch)
    cost = 0
    step = 0
    score: float | None = None
    reason = STOP_FIXED
    done = 0
    for epoch in range(1, epochs + 1):
        try:
            result = train_epoch(net, ctx.ds.train_images, ctx.ds.train_labels, batch, rng, sgd, step)
            score, extra = _score(net, ctx.ds, score_metric, result.accuracy)
        except NumericError:
            score, reason, done = None, STOP_NON_FINITE, epoch
            cost = max(cost, 1)
            break
        step = result.next_step
        cost += cost_units(net, result.samples) + extra
        done = epoch
    return EvalOutcome(
        arch=arch,
        method=f"shortreg_e{epochs}_b{batch}",
        seed=ctx.seed,
        reached_threshold=False,
        score=None if score is None else float(score),
        cost_units=cost,
        wall_ms=int((time.perf_counter() - started) * 1000),
        epochs_stage1=done,
        epochs_stage2=0,
        rejected_early=score is None,
        stop_reason=reason,
    )


@dataclass(frozen=True)
class GroundTruthRecord:
    arch: int
    seed: int
    test_accuracy: float | None
    train_accuracy: float | None
    epochs: int
    cost_units: int
    wall_ms: int
    failure: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def ground_truth_record(arch: int, ctx: EvalContext, cfg: GroundTruthConfig) -> GroundTruthRecord:
    started = time.perf_counter()
    net = ctx.build(arch)
    rng = ctx.batch_rng(arch)
    sgd = ctx.schedule(cfg.epochs, cfg.batch)
    cost = 0
    step = 0
    train_acc: float | None = None
    try:
        for _ in range(cfg.epochs):
            result = train_epoch(net, ctx.ds.train_images, ctx.ds.train_labels, cfg.batch, rng, sgd, step)
            step = result.next_step
            train_acc = result.accuracy
            cost += cost_units(net, result.samples)
        test_acc: float | None = evaluate_accuracy(net, ctx.ds.test_images, ctx.ds.test_labels)
        cost += forward_cost_units(net, len(ctx.ds.test_idx))
        failure = None
    except NumericError as exc:
        logger.warning("ground_truth_non_finite | arch=%d where=%s", arch, exc.where)
        test_acc, failure = None, STOP_NON_FINITE
    record = GroundTruthRecord(
        arch=arch,
        seed=ctx.seed,
        test_accuracy=test_acc,
        train_accuracy=train_acc,
        epochs=cfg.epochs,
        cost_units=max(cost, 1),
        wall_ms=int((time.perf_counter() - started) * 1000),
        failure=failure,
    )
    logger.info("ground_truth_done | arch=%d seed=%d test_acc=%s", arch, ctx.seed, test_acc)
    return record


def ground_truth(arch: int, ctx: EvalContext, cfg: GroundTruthConfig) -> float:
    record = ground_truth_record(arch, ctx, cfg)
    if record.test_accuracy is None:
        raise NumericError(f"ground-truth training diverged for arch {arch}", where="ground_truth")
    return record.test_accuracy


def training_checkpoints(arch: int, ctx: EvalContext, epochs: int, batch: int) -> Iterator[tuple[int, Network]]:
    """Yield the network at initialisation and after each of ``epochs`` epochs."""
    net = ctx.build(arch)
    rng = ctx.batch_rng(arch)
    sgd = ctx.schedule(ctx.horizon_epochs, batch)
    step = 0
    yield 0, net
    for epoch in range(1, epochs + 1):
        step = train_epoch(net, ctx.ds.train_images, ctx.ds.train_labels, batch, rng, sgd, step).next_step
        yield epoch, net
