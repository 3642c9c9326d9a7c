from __future__ import annotations

import math

import numpy as np
import pytest

from src.config import JACOB_EPS, MacroConfig
from src.errors import DomainError
from src.layers import Conv2d, GlobalAvgPool, Linear, ReLU, Sequential, softmax_cross_entropy
from src.network import build_network, cost_units
from src.search_space import CellSpec, OpKind
from src.trainer import loss_and_backward
from src.zero_cost import (
    ProxyKind,
    as_float64,
    compute_proxies,
    grad_norm,
    grasp,
    input_jacobians,
    jacob_cov_from_jacobians,
    jacob_cov_score,
    saliency_score,
    vote_ranking,
    vote_scores,
)


def _mk_net(seed: int = 0):
    macro = MacroConfig(stages=2, cells_per_stage=1, init_channels=4, num_classes=4, image_hw=8)
    spec = CellSpec((OpKind.CONV3X3, OpKind.SKIP_CONNECTION, OpKind.CONV1X1, OpKind.AVGPOOL3X3, OpKind.ZEROIZE, OpKind.CONV3X3))
    return build_network(spec, macro, seed)


def _mk_batch(n: int = 6, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3, 8, 8)).astype(np.float32), rng.integers(0, 4, size=n)


def _mk_mlp(seed: int = 0) -> Sequential:
    rng = np.random.default_rng(seed)
    return Sequential(
        [
            Linear(3, 4, rng=rng, dtype=np.float64, name="fc1"),
            ReLU(name="relu"),
            Linear(4, 3, rng=rng, dtype=np.float64, name="fc2"),
        ]
    )


def test_synflow_two_by_two_linear_is_ten() -> None:
    lin = Linear(2, 2, rng=np.random.default_rng(0), bias=False, dtype=np.float64)
    lin.weight.value[...] = [[1.0, -2.0], [3.0, 4.0]]
    score = saliency_score(ProxyKind.SYNFLOW, Sequential([lin]), np.zeros((5, 2)), np.zeros(5, dtype=np.int64))
    assert score == 10.0


def test_synflow_ignores_the_data() -> None:
    net = _mk_net()
    x1, y1 = _mk_batch(seed=1)
    x2, y2 = _mk_batch(seed=2)
    a = saliency_score("synflow", net, x1, y1)
    b = saliency_score("synflow", net, x2, y2)
    assert a == b
    assert a > 0


def test_proxies_leave_the_model_untouched() -> None:
    net = _mk_net()
    before = [p.value.copy() for p in net.params()]
    x, y = _mk_batch()
    compute_proxies(net, x, y, [k.value for k in ProxyKind])
    for old, group in zip(before, net.params()):
        assert group.value.dtype == np.float32
        assert np.array_equal(old, group.value)


def test_as_float64_casts_everything() -> None:
    clone = as_float64(_mk_net())
    assert all(p.value.dtype == np.float64 for p in clone.params())
    assert clone.dtype == np.float64
    assert clone.blocks[0].layer.layers[1].running_var.dtype == np.float64


def test_grasp_matches_full_hessian_oracle() -> None:
    model = _mk_mlp()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 3))
    y = rng.integers(0, 3, size=8)
    groups = model.params()

    def flat_grad() -> np.ndarray:
        loss_and_backward(model, x, y)
        return np.concatenate([g.grad.reshape(-1) for g in groups])

    theta = np.concatenate([g.value.reshape(-1) for g in groups])
    g = flat_grad()
    h = 1e-5
    hessian = np.zeros((theta.size, theta.size))
    offset = 0
    for group in groups:
        flat = group.value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            plus = flat_grad()
            flat[i] = old - h
            minus = flat_grad()
            flat[i] = old
            hessian[:, offset + i] = (plus - minus) / (2 * h)
        offset += flat.size
    expected = -float((hessian @ g) @ theta)
    assert grasp(model, x, y) == pytest.approx(expected, rel=1e-3)


def _mk_mlp_batch(seed: int = 3) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng.normal(size=(8, 3)), rng.integers(0, 3, size=8)


def _loss(model: Sequential, x: np.ndarray, y: np.ndarray) -> float:
    return softmax_cross_entropy(model.forward(x), y)[0]


def test_grad_norm_matches_finite_differences() -> None:
    model = _mk_mlp()
    model.layers[0].bias.value[...] = [0.3, -0.2, 0.1, 0.5]
    x, y = _mk_mlp_batch()
    expected = 0.0
    h = 1e-6
    for group in model.params():
        flat = group.value.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            plus = _loss(model, x, y)
            flat[i] = old - h
            minus = _loss(model, x, y)
            flat[i] = old
            grad[i] = (plus - minus) / (2 * h)
        expected += float(np.linalg.norm(grad))
    assert grad_norm(model, x, y) == pytest.approx(expected, rel=1e-6)
    assert saliency_score("grad_norm", model, x, y) == pytest.approx(expected, rel=1e-6)


def test_fisher_matches_hand_computed_mlp() -> None:
    model = _mk_mlp()
    model.layers[0].bias.value[...] = [0.3, -0.2, 0.1, 0.5]
    x, y = _mk_mlp_batch()
    w1, b1 = model.layers[0].weight.value, model.layers[0].bias.value
    w2, b2 = model.layers[2].weight.value, model.layers[2].bias.value
    a = np.maximum(x @ w1.T + b1, 0.0)
    logits = a @ w2.T + b2
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    dlogits = probs.copy()
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits /= len(y)
    da = dlogits @ w2
    expected = float((((a * da).sum(axis=0)) ** 2).sum())
    assert expected > 0.0
    assert saliency_score("fisher", model, x, y) == pytest.approx(expected, rel=1e-10)


def test_fisher_sums_batch_and_space_per_channel() -> None:
    rng = np.random.default_rng(5)
    conv = Conv2d(1, 2, 3, 1, 1, rng=rng, dtype=np.float64, name="conv")
    head = Linear(2, 3, rng=rng, dtype=np.float64, name="fc")
    model = Sequential([conv, ReLU(name="relu"), GlobalAvgPool(name="gap"), head])
    x = rng.normal(size=(4, 1, 3, 3))
    y = np.array([0, 1, 2, 1])
    a = np.maximum(conv.forward(x), 0.0)
    logits = a.mean(axis=(2, 3)) @ head.weight.value.T + head.bias.value
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    dlogits = probs.copy()
    dlogits[np.arange(4), y] -= 1.0
    dlogits /= 4
    da = (dlogits @ head.weight.value)[:, :, None, None] / 9.0
    expected = float((((a * da).sum(axis=(0, 2, 3))) ** 2).sum())
    assert saliency_score("fisher", model, x, y) == pytest.approx(expected, rel=1e-10)


def test_non_negative_saliencies() -> None:
    net = _mk_net()
    x, y = _mk_batch()
    for kind in ("grad_norm", "snip", "fisher"):
        assert saliency_score(kind, net, x, y) >= 0.0


def test_snip_of_zero_weights_is_zero() -> None:
    model = _mk_mlp()
    for group in model.params():
        group.value[...] = 0.0
    x = np.ones((4, 3))
    assert saliency_score("snip", model, x, np.array([0, 1, 2, 0])) == 0.0


def test_jacob_cov_identity_correlation_is_maximal() -> None:
    n = 4
    score = jacob_cov_from_jacobians(np.eye(n, 6) * 3.0)
    expected = -n * (math.log(1 + JACOB_EPS) + 1 / (1 + JACOB_EPS))
    assert score == pytest.approx(expected, rel=1e-9)


def test_jacob_cov_identical_rows() -> None:
    n = 3
    rows = np.tile(np.array([[1.0, 2.0, -1.0, 0.5]]), (n, 1))
    eps = JACOB_EPS
    expected = -(math.log(n + eps) + 1 / (n + eps)) - (n - 1) * (math.log(eps) + 1 / eps)
    assert jacob_cov_from_jacobians(rows) == pytest.approx(expected, rel=1e-6)


def test_jacob_cov_needs_two_inputs() -> None:
    with pytest.raises(DomainError):
        jacob_cov_from_jacobians(np.ones((1, 4)))


def test_jacob_cov_on_network() -> None:
    net = _mk_net()
    x, _ = _mk_batch()
    assert math.isfinite(jacob_cov_score(net, x))
    frozen = as_float64(_mk_net())
    frozen.freeze_prefix(1)
    with pytest.raises(DomainError):
        input_jacobians(frozen, x.astype(np.float64))


def test_proxy_costs() -> None:
    net = _mk_net()
    x, y = _mk_batch(6)
    scores = compute_proxies(net, x, y, ["synflow", "synflow_bn", "grasp", "snip"])
    assert scores["synflow"].cost_units == cost_units(net, 1)
    assert scores["synflow_bn"].cost_units == cost_units(net, 2)
    assert scores["grasp"].cost_units == 3 * cost_units(net, 6)
    assert scores["snip"].cost_units == cost_units(net, 6)


def test_vote_agrees_with_unanimous_order() -> None:
    scores = {a: {"synflow": float(a), "jacob_cov": float(a) - 10, "snip": 2.0 * a} for a in (5, 1, 9, 3)}
    assert vote_ranking([5, 1, 9, 3], scores) == [9, 5, 3, 1]
    assert vote_scores([5, 1, 9, 3], scores) == {9: 4.0, 5: 3.0, 3: 2.0, 1: 1.0}


def test_vote_majority_overrides_synflow() -> None:
    scores = {
        1: {"synflow": 10.0, "jacob_cov": 0.0, "snip": 0.0},
        2: {"synflow": 0.0, "jacob_cov": 1.0, "snip": 1.0},
    }
    assert vote_ranking([1, 2], scores) == [2, 1]


def test_vote_cycle_falls_back_to_synflow_then_id() -> None:
    scores = {
        1: {"synflow": 3.0, "jacob_cov": 1.0, "snip": 2.0},
        2: {"synflow": 2.0, "jacob_cov": 3.0, "snip": 1.0},
        3: {"synflow": 1.0, "jacob_cov": 2.0, "snip": 3.0},
    }
    # every arch wins exactly one pair
    assert vote_ranking([3, 2, 1], scores) == [1, 2, 3]
    tied = {a: {"synflow": 1.0, "jacob_cov": 1.0, "snip": 1.0} for a in (7, 4)}
    assert vote_ranking([7, 4], tied) == [4, 7]


def test_vote_needs_all_three_scores() -> None:
    with pytest.raises(DomainError):
        vote_ranking([1, 2], {1: {"synflow": 1.0}, 2: {"synflow": 2.0}})
