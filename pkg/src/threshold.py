from __future__ import annotations

from dataclasses import asdict, dataclass
import time

import numpy as np

from src.config import SgdConfig, ThresholdConfig
from src.datasets import ImageDataset
from src.errors import DomainError
from src.hog import hog_batch
from src.layers import Linear, ReLU, Sequential
from src.logger import get_logger
from src.rng import derive_seed
from src.trainer import evaluate_accuracy, steps_per_epoch, train_epoch

logger = get_logger("threshold")


@dataclass(frozen=True)
class ThresholdResult:
    tau: float
    train_accuracy: float
    val_accuracy: float | None
    chance: float
    feature_dim: int
    wall_ms: int

    def to_dict(self) -> dict[str, float | int]:
        return asdict(self)


def build_shallow_learner(d_in: int, cfg: ThresholdConfig, num_classes: int, rng: np.random.Generator) -> Sequential:
    h1, h2 = cfg.hidden_sizes
    return Sequential(
        [
            Linear(d_in, h1, rng=rng, name="mlp.fc1"),
            ReLU(name="mlp.relu1"),
            Linear(h1, h2, rng=rng, name="mlp.fc2"),
            ReLU(name="mlp.relu2"),
            Linear(h2, num_classes, rng=rng, name="mlp.fc3"),
        ],
        name="mlp",
    )


def fit_threshold_learner(ds: ImageDataset, cfg: ThresholdConfig) -> ThresholdResult:
    """Train HoG features -> two-hidden-layer MLP and report its accuracies."""
    if ds.num_classes < 2:
        raise DomainError("threshold learner needs at least two classes")
    started = time.perf_counter()
    train_x = hog_batch(ds.train_images, cfg.hog).astype(np.float32)
    train_y = ds.train_labels
    test_x = hog_batch(ds.test_images, cfg.hog).astype(np.float32) if len(ds.test_idx) else None
    if cfg.target_metric == "val_accuracy" and test_x is None:
        raise DomainError("val_accuracy threshold needs a test split")

    rng = np.random.default_rng(derive_seed(cfg.seed, "threshold.init"))
    mlp = build_shallow_learner(train_x.shape[1], cfg, ds.num_classes, rng)
    # constant learning rate: lr_min == lr_max
    sgd = SgdConfig(lr_max=cfg.lr, lr_min=cfg.lr, total_steps=max(1, cfg.epochs * steps_per_epoch(len(train_y), cfg.batch)))
    batch_rng = np.random.default_rng(derive_seed(cfg.seed, "threshold.batches"))
    step = 0
    for epoch in range(cfg.epochs):
        result = train_epoch(mlp, train_x, train_y, cfg.batch, batch_rng, sgd, step)
        step = result.next_step
        logger.debug("threshold_epoch | epoch=%d loss=%.4f acc=%.4f", epoch + 1, result.loss, result.accuracy)

    train_acc = evaluate_accuracy(mlp, train_x, train_y)
    val_acc = evaluate_accuracy(mlp, test_x, ds.test_labels) if test_x is not None else None
    tau = train_acc if cfg.target_metric == "train_accuracy" else val_acc
    chance = 1.0 / ds.num_classes
    if not chance < tau < 1.0:
        logger.warning("threshold_out_of_range | tau=%.4f chance=%.4f metric=%s", tau, chance, cfg.target_metric)
    wall_ms = int((time.perf_counter() - started) * 1000)
    logger.info(
        "threshold_done | dataset=%s tau=%.4f train_acc=%.4f val_acc=%s dim=%d",
        ds.name,
        tau,
        train_acc,
        "-" if val_acc is None else f"{val_acc:.4f}",
        train_x.shape[1],
    )
    return ThresholdResult(
        tau=float(tau),
        train_accuracy=float(train_acc),
        val_accuracy=None if val_acc is None else float(val_acc),
        chance=chance,
        feature_dim=int(train_x.shape[1]),
        wall_ms=wall_ms,
    )


def compute_threshold(ds: ImageDataset, cfg: ThresholdConfig) -> float:
    return fit_threshold_learner(ds, cfg).tau
