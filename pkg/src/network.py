from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.config import MacroConfig
from src.errors import DomainError
from src.layers import (
    Add,
    AvgPool3x3,
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    Identity,
    Layer,
    Linear,
    ParamGroup,
    ReLU,
    Sequential,
    Shape,
    check_finite,
)
from src.search_space import EDGES, NUM_NODES, CellSpec, OpKind

IN_CHANNELS = 3


def relu_conv_bn(
    c_in: int, c_out: int, k: int, stride: int, pad: int, *, rng: np.random.Generator, dtype: np.dtype, name: str
) -> Sequential:
    return Sequential(
        [
            ReLU(name=f"{name}.relu"),
            Conv2d(c_in, c_out, k, stride, pad, rng=rng, dtype=dtype, name=f"{name}.conv"),
            BatchNorm2d(c_out, dtype=dtype, name=f"{name}.bn"),
        ],
        name=name,
    )


def make_op(op: OpKind, channels: int, *, rng: np.random.Generator, dtype: np.dtype, name: str) -> Layer | None:
    if op == OpKind.ZEROIZE:
        return None
    if op == OpKind.SKIP_CONNECTION:
        return Identity(name=name)
    if op == OpKind.CONV1X1:
        return relu_conv_bn(channels, channels, 1, 1, 0, rng=rng, dtype=dtype, name=name)
    if op == OpKind.CONV3X3:
        return relu_conv_bn(channels, channels, 3, 1, 1, rng=rng, dtype=dtype, name=name)
    return AvgPool3x3(name=name)


class Cell(Layer):
    """Four-node DAG; node j sums op(node i) over its incoming edges."""

    def __init__(self, spec: CellSpec, channels: int, *, rng: np.random.Generator, dtype: np.dtype, name: str) -> None:
        self.spec = spec
        self.name = name
        self.ops: dict[tuple[int, int], Layer | None] = {}
        for edge, op in zip(EDGES, spec.edge_ops):
            self.ops[edge] = make_op(op, channels, rng=rng, dtype=dtype, name=f"{name}.edge{edge[0]}{edge[1]}")
        self._add = Add()

    def children(self) -> list[Layer]:
        return [op for op in self.ops.values() if op is not None]

    def params(self) -> list[ParamGroup]:
        return [p for op in self.children() for p in op.params()]

    def _incoming(self, target: int) -> list[tuple[int, Layer]]:
        return [(src, self.ops[(src, target)]) for src in range(target) if self.ops[(src, target)] is not None]

    def forward(self, x: np.ndarray) -> np.ndarray:
        nodes = [x]
        for target in range(1, NUM_NODES):
            inputs = [check_finite(op.forward(nodes[src]), op.name) for src, op in self._incoming(target)]
            nodes.append(self._add.forward(inputs) if inputs else np.zeros_like(x))
        return nodes[-1]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        grads = [np.zeros_like(dout) for _ in range(NUM_NODES)]
        grads[-1] = dout
        for target in range(NUM_NODES - 1, 0, -1):
            for src, op in self._incoming(target):
                grads[src] = grads[src] + op.backward(grads[target])
        return grads[0]

    def trace(self, in_shape: Shape) -> tuple[Shape, int]:
        return in_shape, sum(op.trace(in_shape)[1] for op in self.children())


class ResidualBlock(Layer):
    """Stride-2 basic block that doubles channels between stages."""

    def __init__(self, c_in: int, c_out: int, *, rng: np.random.Generator, dtype: np.dtype, name: str) -> None:
        self.name = name
        self.conv_a = relu_conv_bn(c_in, c_out, 3, 2, 1, rng=rng, dtype=dtype, name=f"{name}.conv_a")
        self.conv_b = relu_conv_bn(c_out, c_out, 3, 1, 1, rng=rng, dtype=dtype, name=f"{name}.conv_b")
        self.shortcut = Sequential(
            [
                Conv2d(c_in, c_out, 1, 2, 0, rng=rng, dtype=dtype, name=f"{name}.shortcut.conv"),
                BatchNorm2d(c_out, dtype=dtype, name=f"{name}.shortcut.bn"),
            ],
            name=f"{name}.shortcut",
        )
        self._add = Add()

    def children(self) -> list[Layer]:
        return [self.conv_a, self.conv_b, self.shortcut]

    def params(self) -> list[ParamGroup]:
        return [p for child in self.children() for p in child.params()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._add.forward([self.conv_b.forward(self.conv_a.forward(x)), self.shortcut.forward(x)])

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.conv_a.backward(self.conv_b.backward(dout)) + self.shortcut.backward(dout)

    def trace(self, in_shape: Shape) -> tuple[Shape, int]:
        mid, macs_a = self.conv_a.trace(in_shape)
        out, macs_b = self.conv_b.trace(mid)
        _, macs_s = self.shortcut.trace(in_shape)
        return out, macs_a + macs_b + macs_s


@dataclass
class Block:
    name: str
    kind: str
    layer: Layer
    in_shape: Shape
    out_shape: Shape
    macs: int

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.layer.params())


class Network(Layer):
    """Stem, body blocks (cells and reductions) and classifier head.

    ``frozen_blocks`` counts leading blocks (stem first) that are frozen; they
    are skipped entirely during backward and their batchnorms use running
    statistics without updating them.
    """

    def __init__(self, blocks: list[Block], spec: CellSpec, macro: MacroConfig, dtype: np.dtype) -> None:
        self.blocks = blocks
        self.spec = spec
        self.macro = macro
        self.dtype = np.dtype(dtype)
        self.name = "network"
        self.frozen_blocks = 0
        self.training = True
        self._apply_modes()

    @property
    def body(self) -> list[Block]:
        return self.blocks[1:-1]

    @property
    def num_params(self) -> int:
        return sum(block.num_params for block in self.blocks)

    def children(self) -> list[Layer]:
        return [block.layer for block in self.blocks]

    def params(self) -> list[ParamGroup]:
        return [p for block in self.blocks for p in block.layer.params()]

    def set_training(self, training: bool) -> None:
        self.training = training
        self._apply_modes()

    def _apply_modes(self) -> None:
        for idx, block in enumerate(self.blocks):
            if idx < self.frozen_blocks or not self.training:
                block.layer.set_bn_mode("eval")
            else:
                block.layer.set_bn_mode("train")

    def freeze_prefix(self, boundary: int) -> None:
        """Freeze the stem and the first ``boundary`` body blocks."""
        if not 0 <= boundary <= len(self.body):
            raise DomainError(f"freeze boundary {boundary} outside [0, {len(self.body)}]")
        self.frozen_blocks = boundary + 1
        for idx, block in enumerate(self.blocks):
            for group in block.layer.params():
                group.frozen = idx < self.frozen_blocks
                if group.frozen:
                    group.grad = None
        self._apply_modes()

    def unfreeze(self) -> None:
        self.frozen_blocks = 0
        for group in self.params():
            group.frozen = False
        self._apply_modes()

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = x.astype(self.dtype, copy=False)
        for block in self.blocks:
            x = check_finite(block.layer.forward(x), block.name)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray | None:
        """Backpropagate through the trainable suffix; returns the input
        gradient only when nothing is frozen."""
        for idx in range(len(self.blocks) - 1, self.frozen_blocks - 1, -1):
            dout = self.blocks[idx].layer.backward(dout)
        return dout if self.frozen_blocks == 0 else None


def build_network(spec: CellSpec, macro: MacroConfig, seed: int, dtype: np.dtype = np.float32) -> Network:
    rng = np.random.default_rng(seed)
    channels = macro.stage_channels()
    layers: list[tuple[str, str, Layer]] = []

    stem = Sequential(
        [
            Conv2d(IN_CHANNELS, channels[0], 3, 1, 1, rng=rng, dtype=dtype, name="stem.conv"),
            BatchNorm2d(channels[0], dtype=dtype, name="stem.bn"),
        ],
        name="stem",
    )
    layers.append(("stem", "stem", stem))

    index = 0
    for stage, c in enumerate(channels):
        if stage > 0:
            name = f"cells.{index}"
            layers.append((name, "reduction", ResidualBlock(channels[stage - 1], c, rng=rng, dtype=dtype, name=name)))
            index += 1
        for _ in range(macro.cells_per_stage):
            name = f"cells.{index}"
            layers.append((name, "cell", Cell(spec, c, rng=rng, dtype=dtype, name=name)))
            index += 1

    head = Sequential(
        [GlobalAvgPool(name="head.gap"), Linear(channels[-1], macro.num_classes, rng=rng, dtype=dtype, name="head.fc")],
        name="head",
    )
    layers.append(("head", "head", head))

    blocks = []
    shape: Shape = (IN_CHANNELS, macro.image_hw, macro.image_hw)
    for name, kind, layer in layers:
        out_shape, macs = layer.trace(shape)
        blocks.append(Block(name=name, kind=kind, layer=layer, in_shape=shape, out_shape=out_shape, macs=macs))
        shape = out_shape
    return Network(blocks, spec, macro, dtype)


def param_fraction_up_to(net: Network, boundary: int | float) -> float:
    """Share of all parameters held by the stem and body blocks before ``boundary``.

    A float in (0, 1) is read as a target fraction and snapped first.
    """
    if isinstance(boundary, float):
        boundary = snap_freeze_boundary(net, boundary)
    if not 0 <= boundary <= len(net.body):
        raise DomainError(f"boundary {boundary} outside [0, {len(net.body)}]")
    total = net.num_params
    prefix = sum(block.num_params for block in net.blocks[: boundary + 1])
    return prefix / total


def snap_freeze_boundary(net: Network, fraction: float) -> int:
    """Body boundary whose frozen prefix share is nearest ``fraction``; ties go to the lower boundary."""
    shares = [param_fraction_up_to(net, boundary) for boundary in range(len(net.body) + 1)]
    return min(range(len(shares)), key=lambda b: (abs(shares[b] - fraction), b))


def cost_units(net: Network, batch_size: int) -> int:
    """Deterministic cost of one training step: frozen blocks pay the forward
    pass only, trainable blocks pay forward plus a double-cost backward."""
    per_sample = sum(block.macs * (1 if idx < net.frozen_blocks else 3) for idx, block in enumerate(net.blocks))
    return int(per_sample * batch_size)


def forward_cost_units(net: Network, batch_size: int) -> int:
    return int(sum(block.macs for block in net.blocks) * batch_size)
