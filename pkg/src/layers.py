"""Dense layers with hand-written forward and backward passes.

Every layer caches what its backward pass needs during ``forward`` and
consumes that cache in ``backward``. Parameters live in ``ParamGroup``
objects; a frozen group never receives a gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.config import BN_EPS, BN_MOMENTUM
from src.errors import NumericError, ShapeError

Shape = tuple[int, ...]


class ParamKind(str, Enum):
    CONV_WEIGHT = "conv_weight"
    BN_GAMMA = "bn_gamma"
    BN_BETA = "bn_beta"
    LINEAR_WEIGHT = "linear_weight"
    LINEAR_BIAS = "linear_bias"


@dataclass(eq=False)
class ParamGroup:
    name: str
    kind: ParamKind
    value: np.ndarray
    frozen: bool = False
    grad: np.ndarray | None = None
    momentum_buffer: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.momentum_buffer = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def accumulate(self, grad: np.ndarray) -> None:
        if self.frozen:
            return
        if grad.shape != self.value.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match {self.name} {self.value.shape}")
        self.grad = grad if self.grad is None else self.grad + grad


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values produced by {where}", where=where)
    return x


class Layer:
    name: str = "layer"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[ParamGroup]:
        return []

    def trace(self, in_shape: Shape) -> tuple[Shape, int]:
        """Per-sample output shape and multiply-accumulate count."""
        return in_shape, 0

    def set_bn_mode(self, mode: str) -> None:
        for child in self.children():
            child.set_bn_mode(mode)

    def children(self) -> list[Layer]:
        return []

    def zero_grad(self) -> None:
        for group in self.params():
            group.grad = None

    def set_training(self, training: bool) -> None:
        self.set_bn_mode("train" if training else "eval")


def _kaiming(rng: np.random.Generator, shape: Shape, fan_in: int, dtype: np.dtype) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class Conv2d(Layer):
    """Bias-free square convolution with zero padding."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        stride: int = 1,
        pad: int = 0,
        *,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
        name: str = "conv",
    ) -> None:
        self.c_in, self.c_out, self.k, self.stride, self.pad = c_in, c_out, k, stride, pad
        self.name = name
        self.weight = ParamGroup(
            f"{name}.weight",
            ParamKind.CONV_WEIGHT,
            _kaiming(rng, (c_out, c_in, k, k), c_in * k * k, dtype),
        )
        self._cache: tuple[np.ndarray, Shape] | None = None

    def params(self) -> list[ParamGroup]:
        return [self.weight]

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for kernel {self.k}")
        return ho, wo

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: expected (N, {self.c_in}, H, W), got {x.shape}")
        p, s = self.pad, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (self.k, self.k), axis=(2, 3))[:, :, ::s, ::s]
        out = np.tensordot(windows, self.weight.value, axes=([1, 4, 5], [1, 2, 3]))
        self._cache = (windows, xp.shape)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward called before forward")
        windows, padded_shape = self._cache
        if not self.weight.frozen:
            self.weight.accumulate(np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3])))
        n, _, ho, wo = dout.shape
        s, k = self.stride, self.k
        dxp = np.zeros(padded_shape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(dout, self.weight.value[:, :, i, j], axes=([1], [0]))
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += contrib.transpose(0, 3, 1, 2)
        p = self.pad
        return dxp[:, :, p : padded_shape[2] - p, p : padded_shape[3] - p] if p else dxp

    def trace(self, in_shape: Shape) -> tuple[Shape, int]:
        _, h, w = in_shape
        ho, wo = self._out_hw(h, w)
        return (self.c_out, ho, wo), self.k * self.k * self.c_in * self.c_out * ho * wo


class BatchNorm2d(Layer):
    """Per-channel batchnorm.

    Modes: ``train`` normalises with batch statistics and updates the running
    averages, ``frozen_train`` uses batch statistics without updating them,
    ``eval`` uses the running averages, ``identity`` passes input through.
    """

    MODES = ("train", "frozen_train", "eval", "identity")

    def __init__(self, channels: int, *, dtype: np.dtype = np.float32, name: str = "bn") -> None:
        self.channels = channels
        self.name = name
        self.gamma = ParamGroup(f"{name}.gamma", ParamKind.BN_GAMMA, np.ones(channels, dtype=dtype))
        self.beta = ParamGroup(f"{name}.beta", ParamKind.BN_BETA, np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = BN_MOMENTUM
        self.eps = BN_EPS
        self.mode = "train"
        self._cache: tuple[str, np.ndarray, np.ndarray] | None = None

    def params(self) -> list[ParamGroup]:
        return [self.gamma, self.beta]

    def set_bn_mode(self, mode: str) -> None:
        if mode not in self.MODES:
            raise ValueError(f"Unknown batchnorm mode: {mode}")
        self.mode = mode

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected (N, {self.channels}, H, W), got {x.shape}")
        if self.mode == "identity":
            self._cache = ("identity", x, x)
            return x
        if self.mode in ("train", "frozen_train"):
            if x.shape[0] < 2:
                raise ShapeError(f"{self.name}: training-mode batchnorm needs batch >= 2")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if self.mode == "train":
                count = x.shape[0] * x.shape[2] * x.shape[3]
                unbiased = var * count / max(count - 1, 1)
                self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(x.dtype)
                self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(x.dtype)
            mode = "batch"
        else:
            mean, var = self.running_mean, self.running_var
            mode = "running"
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (mode, xhat, inv_std)
        return xhat * self.gamma.value[None, :, None, None] + self.beta.value[None, :, None, None]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward called before forward")
        mode, xhat, inv_std = self._cache
        if mode == "identity":
            return dout
        dgamma = (dout * xhat).sum(axis=(0, 2, 3))
        dbeta = dout.sum(axis=(0, 2, 3))
        self.gamma.accumulate(dgamma)
        self.beta.accumulate(dbeta)
        scale = (self.gamma.value * inv_std)[None, :, None, None]
        if mode == "running":
            return dout * scale
        count = dout.shape[0] * dout.shape[2] * dout.shape[3]
        return scale / count * (
            count * dout - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None]
        )

    def trace(self, in_shape: Shape) -> tuple[Shape, int]:
        return in_shape, int(np.prod(in_shape))


class ReLU(Layer):
    def __init__(self, name: str = "relu") -> None:
        self.name = name
        self.record = False
        self.activation: np.ndarray | None = None
        self.activation_grad: np.ndarray | None = None
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        out = np.where(self._mask, x, 0).astype(x.dtype, copy=False)
        if self.record:
            self.activation = out
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self.record:
            self.activation_grad = dout
        return np.where(self._mask, dout, 0).astype(dout.dtype, copy=False)


class AvgPool3x3(Layer):
    """3x3 average pool, stride 1, zero padding 1, divisor always 9."""

    def __init__(self, name: str = "avgpool") -> None:
        self.name = name
        self._shape: Shape | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected 4-d input, got {x.shape}")
        self._shape = x.shape
        h, w = x.shape[2], x.shape[3]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros_like(x)
        for i in range(3):
            for j in range(3):
                out += xp[:, :, i : i + h, j : j + w]
        return out / 9.0

    def backward(self, dout: np.ndarray) -> np.ndarray:
        h, w = self._shape[2], self._shape[3]
        dxp = np.zeros((dout.shape[0], dout.shape[1], h + 2, w + 2), dtype=dout.dtype)
        scaled = dout / 9.0
        for i in range(3):
            for j in range(3):
                dxp[:, :, i : i + h, j : j + w] += scaled
        return dxp[:, :, 1:-1, 1:-1]

    def trace(self, in_shape: Shape) -> tuple[Shape, int]:
        return in_shape, 9 * int(np.prod(in_shape))


class Identity(Layer):
    def __init__(self, name: str = "skip") -> None:
        self.name = name

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout


class GlobalAvgPool(Layer):
    def __init__(self, name: str = "gap") -> None:
        self.name = name
        self._shape: Shape | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected 4-d input, got {x.shape}")
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, c, h, w = self._shape
        return np.broadcast_to((dout / (h * w))[:, :, None, None], (n, c, h, w)).copy()

    def trace(self, in_shape: Shape) -> tuple[Shape, int]:
        return (in_shape[0],), int(np.prod(in_shape))


class Linear(Layer):
    def __init__(
        self,
        d_in: int,
        d_out: int,
        *,
        rng: np.random.Generator,
        bias: bool = True,
        dtype: np.dtype = np.float32,
        name: str = "linear",
    ) -> None:
        self.d_in, self.d_out = d_in, d_out
        self.name = name
        self.weight = ParamGroup(
            f"{name}.weight", ParamKind.LINEAR_WEIGHT, _kaiming(rng, (d_out, d_in), d_in, dtype)
        )
        self.bias = (
            ParamGroup(f"{name}.bias", ParamKind.LINEAR_BIAS, np.zeros(d_out, dtype=dtype)) if bias else None
        )
        self._x: np.ndarray | None = None

    def params(self) -> list[ParamGroup]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"{self.name}: expected (N, {self.d_in}), got {x.shape}")
        self._x = x
        out = x @ self.weight.value.T
        if self.bias is not None:
            out = out + self.bias.value
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.weight.accumulate(dout.T @ self._x)
        if self.bias is not None:
            self.bias.accumulate(dout.sum(axis=0))
        return dout @ self.weight.value

    def trace(self, in_shape: Shape) -> tuple[Shape, int]:
        return (self.d_out,), self.d_in * self.d_out


class Add:
    """Elementwise sum of several same-shape inputs."""

    name = "add"

    def forward(self, xs: list[np.ndarray]) -> np.ndarray:
        if not xs:
            raise ShapeError("add: no inputs")
        shape = xs[0].shape
        for x in xs[1:]:
            if x.shape != shape:
                raise ShapeError(f"add: shape mismatch {shape} vs {x.shape}")
        out = xs[0].copy()
        for x in xs[1:]:
            out += x
        return out

    def backward(self, dout: np.ndarray, count: int) -> list[np.ndarray]:
        return [dout] * count


class Sequential(Layer):
    def __init__(self, layers: list[Layer], name: str = "seq") -> None:
        self.layers = layers
        self.name = name

    def children(self) -> list[Layer]:
        return self.layers

    def params(self) -> list[ParamGroup]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = check_finite(layer.forward(x), layer.name)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def trace(self, in_shape: Shape) -> tuple[Shape, int]:
        total = 0
        for layer in self.layers:
            in_shape, macs = layer.trace(in_shape)
            total += macs
        return in_shape, total


def layer_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    return check_finite(layer.forward(x), layer.name)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, float]:
    """Mean cross-entropy, its gradient w.r.t. logits and the argmax accuracy."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    accuracy = float((logits.argmax(axis=1) == labels).mean())
    return loss, dlogits.astype(logits.dtype, copy=False), accuracy
