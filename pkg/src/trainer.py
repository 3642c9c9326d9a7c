from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Iterator

import numpy as np

from src.config import SgdConfig
from src.errors import DomainError, NumericError
from src.layers import Layer, softmax_cross_entropy
from src.optim import sgd_step


@dataclass(frozen=True)
class EpochResult:
    loss: float
    accuracy: float
    steps: int
    samples: int
    next_step: int


def loss_and_backward(model: Layer, images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Forward, softmax cross-entropy and backward; gradients land on every
    non-frozen parameter group."""
    if len(labels) == 0:
        raise DomainError("empty batch")
    model.zero_grad()
    logits = model.forward(images)
    num_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DomainError(f"labels must lie in [0, {num_classes})")
    loss, dlogits, accuracy = softmax_cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss", where=getattr(model, "name", "model"))
    model.backward(dlogits)
    return loss, accuracy


def _check_batch(batch: int) -> None:
    if batch < 2:
        raise DomainError(f"batch size must be >= 2, got {batch}")


def iter_batches(n: int, batch: int, rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    """Shuffled index batches; a trailing batch of one sample is dropped
    because training-mode batchnorm needs two."""
    _check_batch(batch)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch):
        idx = order[start : start + batch]
        if len(idx) >= 2:
            yield idx


def steps_per_epoch(n: int, batch: int) -> int:
    _check_batch(batch)
    full, rest = divmod(n, batch)
    return full + (1 if rest >= 2 else 0)


def train_epoch(
    model: Layer,
    images: np.ndarray,
    labels: np.ndarray,
    batch: int,
    rng: np.random.Generator,
    sgd: SgdConfig,
    step: int,
) -> EpochResult:
    model.set_training(True)
    total_loss = 0.0
    correct = 0.0
    samples = 0
    steps = 0
    for idx in iter_batches(len(labels), batch, rng):
        loss, accuracy = loss_and_backward(model, images[idx], labels[idx])
        sgd_step(model, min(step, sgd.total_steps), sgd)
        step += 1
        steps += 1
        total_loss += loss * len(idx)
        correct += accuracy * len(idx)
        samples += len(idx)
    if samples == 0:
        raise DomainError("epoch produced no batches; dataset too small for training")
    return EpochResult(loss=total_loss / samples, accuracy=correct / samples, steps=steps, samples=samples, next_step=step)


def evaluate_accuracy(model: Layer, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    if len(labels) == 0:
        raise DomainError("cannot evaluate on an empty split")
    model.set_training(False)
    correct = 0
    try:
        for start in range(0, len(labels), batch):
            logits = model.forward(images[start : start + batch])
            correct += int((logits.argmax(axis=1) == labels[start : start + batch]).sum())
    finally:
        model.set_training(True)
    return correct / len(labels)
