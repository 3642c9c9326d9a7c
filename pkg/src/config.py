from __future__ import annotations

from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
import os
from pathlib import Path
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Any

from src.errors import ConfigError

PROFILE = os.getenv("PROFILE", "desk").strip().lower()

LR_MAX = 0.1
LR_MIN = 0.0
WEIGHT_DECAY = 0.0005
MOMENTUM = 0.9
NESTEROV = True
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

STAGES = 3
NUM_CLASSES = 10
OP_COUNT = 5
EDGE_COUNT = 6
SPACE_SIZE = OP_COUNT**EDGE_COUNT

HOG_CELL = 8
HOG_BINS = 9
HOG_BLOCK = 2
HOG_EPS = 1e-6

THRESHOLD_HIDDEN = (256, 128)
THRESHOLD_EPOCHS = 20
THRESHOLD_LR = 0.05
# Reference value on full CIFAR10; desk runs compute their own.
CIFAR10_TAU = 0.6

FREEZE_FRACTION = 0.53
STAGE2_EPOCHS = 5
STAGE1_MAX_EPOCHS = 50
REJECT_RATIO = 4.0

SHORTREG_EPOCHS = (1, 2, 4, 8)
SHORTREG_BATCHES = (32, 64, 128)
PROXY_BATCH = 64
PROXY_EPOCHS = 3
JACOB_EPS = 1e-5

BIN_PERCENTS = (10, 20, 30, 40, 50, 100)

if PROFILE == "desk":
    CELLS_PER_STAGE = 1
    INIT_CHANNELS = 8
    IMAGE_HW = 16
    N_TOTAL = 1000
    N_TRAIN = 800
    POOL_SIZE = 32
    FULL_EPOCHS = 60
    TRAIN_BATCH = 64
    SEARCH_BUDGET = 50
    SHORTREG_SEARCH_EPOCHS = 8
elif PROFILE == "full":
    CELLS_PER_STAGE = 5
    INIT_CHANNELS = 16
    IMAGE_HW = 32
    N_TOTAL = 60000
    N_TRAIN = 50000
    POOL_SIZE = 1000
    FULL_EPOCHS = 200
    TRAIN_BATCH = 256
    SEARCH_BUDGET = 500
    SHORTREG_SEARCH_EPOCHS = 50
else:
    raise ValueError(f"Unsupported PROFILE='{PROFILE}'. Use 'desk' or 'full'.")

SEEDS = (0, 1, 2)
WORKERS = 1
LOG_FILE = "logs/fear_bench.log"

EXPERIMENT_KINDS = (
    "rank_compare",
    "time_to_threshold",
    "zero_cost_over_epochs",
    "synthetic_zero_cost",
    "random_search_compare",
    "ground_truth_build",
)
SCORE_METRICS = ("train_accuracy", "val_accuracy")
FASTEST_UPDATE_MODES = ("as_printed", "all_completed")
DATASET_SOURCES = ("synthetic", "cifar10", "file")
TAU_SOURCES = ("learner", "config")


@dataclass(frozen=True)
class SgdConfig:
    lr_max: float = LR_MAX
    lr_min: float = LR_MIN
    weight_decay: float = WEIGHT_DECAY
    momentum: float = MOMENTUM
    nesterov: bool = NESTEROV
    total_steps: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ConfigError("need 0 <= lr_min <= lr_max", lr_min=self.lr_min, lr_max=self.lr_max)
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)", momentum=self.momentum)
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive", total_steps=self.total_steps)


@dataclass(frozen=True)
class MacroConfig:
    stages: int = STAGES
    cells_per_stage: int = CELLS_PER_STAGE
    init_channels: int = INIT_CHANNELS
    num_classes: int = NUM_CLASSES
    image_hw: int = IMAGE_HW

    def __post_init__(self) -> None:
        for name in ("stages", "cells_per_stage", "init_channels", "num_classes", "image_hw"):
            if getattr(self, name) < 1:
                raise ConfigError(f"macro.{name} must be positive", value=getattr(self, name))

    def stage_channels(self) -> list[int]:
        return [self.init_channels * 2**idx for idx in range(self.stages)]


@dataclass(frozen=True)
class HogConfig:
    cell: int = HOG_CELL
    bins: int = HOG_BINS
    block: int = HOG_BLOCK
    eps: float = HOG_EPS


@dataclass(frozen=True)
class SyntheticConfig:
    n_total: int = N_TOTAL
    n_train: int = N_TRAIN
    hw: int = IMAGE_HW
    channels: int = 3
    num_classes: int = NUM_CLASSES
    num_labelers: int = NUM_CLASSES
    balance_classes: bool = False
    # Rejection sampling gives up after n_total * max_draw_factor candidates.
    max_draw_factor: int = 50

    def __post_init__(self) -> None:
        if not 0 < self.n_train < self.n_total:
            raise ConfigError("need 0 < n_train < n_total", n_train=self.n_train, n_total=self.n_total)
        if self.num_labelers != self.num_classes:
            raise ConfigError("num_labelers must equal num_classes")
        if self.balance_classes and self.n_total % self.num_classes:
            raise ConfigError("balanced generation needs n_total divisible by num_classes")


@dataclass(frozen=True)
class ThresholdConfig:
    hog: HogConfig = field(default_factory=HogConfig)
    hidden_sizes: tuple[int, int] = THRESHOLD_HIDDEN
    epochs: int = THRESHOLD_EPOCHS
    batch: int = TRAIN_BATCH
    lr: float = THRESHOLD_LR
    seed: int = 0
    target_metric: str = "train_accuracy"

    def __post_init__(self) -> None:
        if len(self.hidden_sizes) != 2 or min(self.hidden_sizes) < 1:
            raise ConfigError("threshold learner needs exactly two positive hidden sizes")
        if self.target_metric not in SCORE_METRICS:
            raise ConfigError(f"unknown target_metric {self.target_metric!r}")


@dataclass(frozen=True)
class FearConfig:
    tau: float = CIFAR10_TAU
    freeze_fraction: float = FREEZE_FRACTION
    stage2_epochs: int = STAGE2_EPOCHS
    stage1_max_epochs: int = STAGE1_MAX_EPOCHS
    batch: int = TRAIN_BATCH
    score_metric: str = "train_accuracy"
    reject_ratio: float = REJECT_RATIO
    # "learner" takes tau from the HoG threshold learner, "config" uses the value above
    tau_source: str = "learner"

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)", tau=self.tau)
        if not 0.0 < self.freeze_fraction < 1.0:
            raise ConfigError("freeze_fraction must lie in (0, 1)", freeze_fraction=self.freeze_fraction)
        if self.reject_ratio <= 1.0:
            raise ConfigError("reject_ratio must exceed 1", reject_ratio=self.reject_ratio)
        if self.stage2_epochs < 0 or self.stage1_max_epochs < 1:
            raise ConfigError("invalid epoch counts")
        if self.tau_source not in TAU_SOURCES:
            raise ConfigError(f"unknown tau_source {self.tau_source!r}")
        if self.score_metric not in SCORE_METRICS:
            raise ConfigError(f"unknown score_metric {self.score_metric!r}")


@dataclass(frozen=True)
class ShortregConfig:
    epochs: tuple[int, ...] = SHORTREG_EPOCHS
    batches: tuple[int, ...] = SHORTREG_BATCHES
    score_metric: str = "train_accuracy"

    def __post_init__(self) -> None:
        if not self.epochs or min(self.epochs) < 1:
            raise ConfigError("shortreg epochs must be >= 1")
        if not self.batches or min(self.batches) < 2:
            raise ConfigError("shortreg batches must be >= 2")


@dataclass(frozen=True)
class GroundTruthConfig:
    epochs: int = FULL_EPOCHS
    batch: int = TRAIN_BATCH


@dataclass(frozen=True)
class ZeroCostConfig:
    batch: int = PROXY_BATCH
    epochs: int = PROXY_EPOCHS
    kinds: tuple[str, ...] = ("grad_norm", "snip", "grasp", "fisher", "synflow", "synflow_bn", "jacob_cov")


@dataclass(frozen=True)
class SearchConfig:
    budget: int = SEARCH_BUDGET
    reject_ratio: float = REJECT_RATIO
    seed: int = 0
    fastest_update_mode: str = "as_printed"
    parallel_jobs: int = 1
    shortreg_epochs: int = SHORTREG_SEARCH_EPOCHS
    shortreg_batch: int = TRAIN_BATCH
    # rerun the stream without budgets and check the rejected set against the replay
    verify_replay: bool = True

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ConfigError("search budget must be >= 1", budget=self.budget)
        if self.reject_ratio <= 1.0:
            raise ConfigError("reject_ratio must exceed 1", reject_ratio=self.reject_ratio)
        if self.fastest_update_mode not in FASTEST_UPDATE_MODES:
            raise ConfigError(f"unknown fastest_update_mode {self.fastest_update_mode!r}")
        if self.parallel_jobs < 1:
            raise ConfigError("parallel_jobs must be >= 1")


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"
    seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    paths: tuple[str, ...] = ()
    test_paths: tuple[str, ...] = ()
    limit_train: int = 0
    limit_test: int = 0

    def __post_init__(self) -> None:
        if self.source not in DATASET_SOURCES:
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source != "synthetic" and not self.paths:
            raise ConfigError(f"dataset source {self.source!r} needs paths")


@dataclass(frozen=True)
class PoolSpec:
    size: int = POOL_SIZE
    seed: int = 0
    ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "rank_compare"
    output_dir: str = "runs/desk"
    ground_truth_dir: str = ""
    seeds: tuple[int, ...] = SEEDS
    workers: int = WORKERS
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    macro: MacroConfig = field(default_factory=MacroConfig)
    pool: PoolSpec = field(default_factory=PoolSpec)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    fear: FearConfig = field(default_factory=FearConfig)
    shortreg: ShortregConfig = field(default_factory=ShortregConfig)
    ground_truth: GroundTruthConfig = field(default_factory=GroundTruthConfig)
    zero_cost: ZeroCostConfig = field(default_factory=ZeroCostConfig)
    search: SearchConfig = field(default_factory=SearchConfig)

    def __post_init__(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}", known=list(EXPERIMENT_KINDS))
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def gt_dir(self) -> Path:
        return Path(self.ground_truth_dir or self.output_dir)

    @classmethod
    def from_file(cls, path: str | os.PathLike[str]) -> ExperimentConfig:
        try:
            data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        return _build(cls, data, "")

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))


def _build(cls: type, raw: dict[str, Any], where: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where or 'root'} must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'root'}: {unknown}")
    kwargs: dict[str, Any] = {}
    for name, value in raw.items():
        default = _default_of(known[name])
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad values in {where or 'root'}: {exc}") from exc


def _default_of(f: Any) -> Any:
    if f.default_factory is not MISSING:
        return f.default_factory()
    return f.default


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value
