from __future__ import annotations

import math
from typing import Iterable, Protocol

import numpy as np

from src.config import SgdConfig
from src.errors import DomainError, NumericError
from src.layers import ParamGroup


class HasParams(Protocol):
    def params(self) -> list[ParamGroup]: ...


def cosine_lr(step: int, cfg: SgdConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise DomainError(f"step {step} outside [0, {cfg.total_steps}]", step=step, total_steps=cfg.total_steps)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * step / cfg.total_steps))


def sgd_step(model: HasParams, step: int, cfg: SgdConfig) -> float:
    """One SGD update with classic L2 decay and optional Nesterov momentum.

    Returns the learning rate used.
    """
    lr = cosine_lr(step, cfg)
    apply_update(model.params(), lr, cfg)
    return lr


def apply_update(groups: Iterable[ParamGroup], lr: float, cfg: SgdConfig) -> None:
    for group in groups:
        if group.frozen or group.grad is None:
            continue
        g = group.grad + cfg.weight_decay * group.value if cfg.weight_decay else group.grad
        if cfg.momentum > 0:
            group.momentum_buffer = cfg.momentum * group.momentum_buffer + g
            update = g + cfg.momentum * group.momentum_buffer if cfg.nesterov else group.momentum_buffer
        else:
            update = g
        new_value = (group.value - lr * update).astype(group.value.dtype, copy=False)
        if not np.isfinite(new_value).all():
            raise NumericError(f"non-finite parameter after update of {group.name}", where=group.name)
        group.value[...] = new_value
