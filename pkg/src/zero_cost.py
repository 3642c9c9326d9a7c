"""Zero-cost proxy scores computed from a single minibatch.

All proxies run on a float64 deep copy of the model, so the caller's network
(weights, batchnorm statistics, recorded activations) is never touched.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum
import itertools
import time
from typing import Iterator, Mapping, Sequence

import numpy as np

from src.config import JACOB_EPS
from src.errors import DomainError, NumericError
from src.layers import BatchNorm2d, Layer, ParamGroup, ReLU
from src.logger import get_logger
from src.network import Network, cost_units
from src.trainer import loss_and_backward

logger = get_logger("zero_cost")


class ProxyKind(str, Enum):
    GRAD_NORM = "grad_norm"
    SNIP = "snip"
    GRASP = "grasp"
    FISHER = "fisher"
    SYNFLOW = "synflow"
    SYNFLOW_BN = "synflow_bn"
    JACOB_COV = "jacob_cov"


VOTE_KINDS = (ProxyKind.SYNFLOW, ProxyKind.JACOB_COV, ProxyKind.SNIP)


@dataclass(frozen=True)
class ProxyScore:
    kind: str
    score: float
    cost_units: int
    wall_ms: int


def iter_layers(layer: Layer) -> Iterator[Layer]:
    yield layer
    for child in layer.children():
        yield from iter_layers(child)


def as_float64(model: Layer) -> Layer:
    """Deep copy of ``model`` with every parameter and running statistic in float64."""
    clone = copy.deepcopy(model)
    for group in clone.params():
        group.value = group.value.astype(np.float64)
        group.momentum_buffer = group.momentum_buffer.astype(np.float64)
        group.grad = None
    for layer in iter_layers(clone):
        if isinstance(layer, BatchNorm2d):
            layer.running_mean = layer.running_mean.astype(np.float64)
            layer.running_var = layer.running_var.astype(np.float64)
    if isinstance(clone, Network):
        clone.dtype = np.dtype(np.float64)
    return clone


def _grads(model: Layer, images: np.ndarray, labels: np.ndarray) -> list[np.ndarray]:
    loss_and_backward(model, images, labels)
    return [np.zeros_like(g.value) if g.grad is None else g.grad for g in model.params()]


def _finite(kind: str, value: float) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {kind} score", where=kind)
    return float(value)


def grad_norm(model: Layer, images: np.ndarray, labels: np.ndarray) -> float:
    return sum(float(np.linalg.norm(g)) for g in _grads(model, images, labels))


def snip(model: Layer, images: np.ndarray, labels: np.ndarray) -> float:
    grads = _grads(model, images, labels)
    return sum(float(np.abs(p.value * g).sum()) for p, g in zip(model.params(), grads))


def hessian_grad_product(
    model: Layer, images: np.ndarray, labels: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradient g and H g by central differences of g along g / |g|,
    with step h = 1e-3 * (1 + max |theta|)."""
    groups: list[ParamGroup] = model.params()
    grads = _grads(model, images, labels)
    gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if gnorm == 0.0:
        return grads, [np.zeros_like(g) for g in grads]
    direction = [g / gnorm for g in grads]
    h = 1e-3 * (1.0 + max(float(np.abs(p.value).max()) for p in groups))
    original = [p.value.copy() for p in groups]

    def shifted(sign: float) -> list[np.ndarray]:
        for p, base, d in zip(groups, original, direction):
            p.value = base + sign * h * d
        return [g.copy() for g in _grads(model, images, labels)]

    try:
        plus, minus = shifted(1.0), shifted(-1.0)
    finally:
        for p, base in zip(groups, original):
            p.value = base
    hg = [(gp - gm) / (2.0 * h) * gnorm for gp, gm in zip(plus, minus)]
    return grads, hg


def grasp(model: Layer, images: np.ndarray, labels: np.ndarray) -> float:
    _, hg = hessian_grad_product(model, images, labels)
    return sum(float(-(v * p.value).sum()) for p, v in zip(model.params(), hg))


def fisher(model: Layer, images: np.ndarray, labels: np.ndarray) -> float:
    relus = [layer for layer in iter_layers(model) if isinstance(layer, ReLU)]
    for relu in relus:
        relu.record = True
    loss_and_backward(model, images, labels)
    total = 0.0
    for relu in relus:
        if relu.activation is None or relu.activation_grad is None:
            continue
        prod = relu.activation * relu.activation_grad
        # summed over batch and space per channel, then squared
        per_channel = prod.sum(axis=(0, 2, 3)) if prod.ndim == 4 else prod.sum(axis=0)
        total += float((per_channel**2).sum())
    return total


def _synflow(model: Layer, ones: np.ndarray, bn_mode: str) -> float:
    for group in model.params():
        group.value = np.abs(group.value)
    model.set_bn_mode(bn_mode)
    model.zero_grad()
    out = model.forward(ones.astype(np.float64))
    model.backward(np.ones_like(out))
    return sum(float((p.value * p.grad).sum()) for p in model.params() if p.grad is not None)


def synflow(model: Layer, images: np.ndarray) -> float:
    """Data-agnostic: only the per-sample input shape of ``images`` is used."""
    return _synflow(model, np.ones((1,) + images.shape[1:]), "identity")


def synflow_bn(model: Layer, images: np.ndarray) -> float:
    return _synflow(model, np.ones((2,) + images.shape[1:]), "train")


def input_jacobians(model: Layer, images: np.ndarray) -> np.ndarray:
    """Per-input gradient of the summed logits, flattened to (n, d)."""
    model.zero_grad()
    out = model.forward(images.astype(np.float64))
    dx = model.backward(np.ones_like(out))
    if dx is None:
        raise DomainError("input jacobians need a network with no frozen blocks")
    return dx.reshape(len(images), -1)


def jacob_cov_from_jacobians(jacobians: np.ndarray, eps: float = JACOB_EPS) -> float:
    """-sum(log(l + eps) + 1 / (l + eps)) over eigenvalues l of the
    (uncentred) correlation matrix of the rows of ``jacobians``."""
    n = jacobians.shape[0]
    if n < 2:
        raise DomainError("jacob_cov needs at least two inputs")
    norms = np.linalg.norm(jacobians, axis=1)
    safe = np.where(norms == 0, 1.0, norms)
    unit = jacobians / safe[:, None]
    corr = unit @ unit.T
    zero = norms == 0
    corr[zero, :] = 0.0
    corr[:, zero] = 0.0
    np.fill_diagonal(corr, 1.0)
    eig = np.clip(np.linalg.eigvalsh(corr), 0.0, None)
    return _finite("jacob_cov", -float(np.sum(np.log(eig + eps) + 1.0 / (eig + eps))))


def jacob_cov(model: Layer, images: np.ndarray) -> float:
    return jacob_cov_from_jacobians(input_jacobians(model, images))


def saliency_score(kind: ProxyKind | str, model: Layer, images: np.ndarray, labels: np.ndarray) -> float:
    kind = ProxyKind(kind)
    work = as_float64(model)
    x = images.astype(np.float64)
    if kind is ProxyKind.GRAD_NORM:
        value = grad_norm(work, x, labels)
    elif kind is ProxyKind.SNIP:
        value = snip(work, x, labels)
    elif kind is ProxyKind.GRASP:
        value = grasp(work, x, labels)
    elif kind is ProxyKind.FISHER:
        value = fisher(work, x, labels)
    elif kind is ProxyKind.SYNFLOW:
        value = synflow(work, x)
    elif kind is ProxyKind.SYNFLOW_BN:
        value = synflow_bn(work, x)
    else:
        raise DomainError("jacob_cov is not a saliency score; use jacob_cov_score")
    return _finite(kind.value, value)


def jacob_cov_score(model: Layer, images: np.ndarray) -> float:
    return jacob_cov(as_float64(model), images)


def proxy_cost_units(kind: ProxyKind | str, net: Network, batch_size: int) -> int:
    """Forward and backward passes only; model instantiation is not charged."""
    kind = ProxyKind(kind)
    if kind is ProxyKind.SYNFLOW:
        return cost_units(net, 1)
    if kind is ProxyKind.SYNFLOW_BN:
        return cost_units(net, 2)
    if kind is ProxyKind.GRASP:
        return 3 * cost_units(net, batch_size)
    return cost_units(net, batch_size)


def compute_proxies(
    net: Network, images: np.ndarray, labels: np.ndarray, kinds: Sequence[str]
) -> dict[str, ProxyScore]:
    scores: dict[str, ProxyScore] = {}
    for name in kinds:
        kind = ProxyKind(name)
        started = time.perf_counter()
        if kind is ProxyKind.JACOB_COV:
            value = jacob_cov_score(net, images)
        else:
            value = saliency_score(kind, net, images, labels)
        scores[kind.value] = ProxyScore(
            kind=kind.value,
            score=value,
            cost_units=proxy_cost_units(kind, net, len(labels)),
            wall_ms=int((time.perf_counter() - started) * 1000),
        )
    if ProxyKind.SYNFLOW_BN.value in scores:
        logger.debug("synflow_bn_interpretation | batchnorm=train input=two_ones")
    return scores


def vote_ranking(archs: Sequence[int], scores: Mapping[int, Mapping[str, float]]) -> list[int]:
    """Copeland ranking from pairwise majorities of synflow, jacob_cov and snip.

    A pair goes to the architecture at least two of the three proxies
    prefer; ties on wins fall back to synflow, then to the lower ArchId.
    """
    kinds = [k.value for k in VOTE_KINDS]
    for arch in archs:
        missing = [k for k in kinds if k not in scores[arch]]
        if missing:
            raise DomainError(f"arch {arch} lacks vote scores {missing}")
    wins = {arch: 0 for arch in archs}
    for a, b in itertools.combinations(archs, 2):
        prefer_a = sum(scores[a][k] > scores[b][k] for k in kinds)
        prefer_b = sum(scores[b][k] > scores[a][k] for k in kinds)
        if prefer_a >= 2:
            wins[a] += 1
        elif prefer_b >= 2:
            wins[b] += 1
    return sorted(archs, key=lambda arch: (-wins[arch], -scores[arch][ProxyKind.SYNFLOW.value], arch))


def vote_scores(archs: Sequence[int], scores: Mapping[int, Mapping[str, float]]) -> dict[int, float]:
    """Vote ranking as scores (higher is better) for rank correlation."""
    order = vote_ranking(archs, scores)
    return {arch: float(len(order) - pos) for pos, arch in enumerate(order)}
