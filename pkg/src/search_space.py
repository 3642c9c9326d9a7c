from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator

import numpy as np

from src.config import EDGE_COUNT, OP_COUNT, SPACE_SIZE
from src.errors import DomainError


class OpKind(IntEnum):
    ZEROIZE = 0
    SKIP_CONNECTION = 1
    CONV1X1 = 2
    CONV3X3 = 3
    AVGPOOL3X3 = 4


OP_NAMES = {
    OpKind.ZEROIZE: "none",
    OpKind.SKIP_CONNECTION: "skip_connect",
    OpKind.CONV1X1: "nor_conv_1x1",
    OpKind.CONV3X3: "nor_conv_3x3",
    OpKind.AVGPOOL3X3: "avg_pool_3x3",
}
OPS_BY_NAME = {name: op for op, name in OP_NAMES.items()}

# Edge k connects EDGES[k] = (source, target); the order defines ArchId.
EDGES: tuple[tuple[int, int], ...] = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
NUM_NODES = 4


@dataclass(frozen=True)
class CellSpec:
    edge_ops: tuple[OpKind, ...]

    def __post_init__(self) -> None:
        if len(self.edge_ops) != EDGE_COUNT:
            raise DomainError(f"cell needs exactly {EDGE_COUNT} edge ops, got {len(self.edge_ops)}")
        object.__setattr__(self, "edge_ops", tuple(OpKind(op) for op in self.edge_ops))

    @classmethod
    def uniform(cls, op: OpKind) -> CellSpec:
        return cls((op,) * EDGE_COUNT)

    def op(self, source: int, target: int) -> OpKind:
        return self.edge_ops[EDGES.index((source, target))]

    def to_string(self) -> str:
        parts = []
        for target in range(1, NUM_NODES):
            ops = "|".join(f"{OP_NAMES[self.op(src, target)]}~{src}" for src in range(target))
            parts.append(f"|{ops}|")
        return "+".join(parts)

    @classmethod
    def from_string(cls, text: str) -> CellSpec:
        nodes = text.strip().split("+")
        if len(nodes) != NUM_NODES - 1:
            raise DomainError(f"cell string needs {NUM_NODES - 1} node groups: {text!r}")
        ops: dict[tuple[int, int], OpKind] = {}
        for target, group in enumerate(nodes, start=1):
            tokens = [tok for tok in group.strip().strip("|").split("|") if tok]
            if len(tokens) != target:
                raise DomainError(f"node {target} needs {target} inputs in {text!r}")
            for token in tokens:
                name, _, src = token.partition("~")
                if name not in OPS_BY_NAME or not src.isdigit() or int(src) >= target:
                    raise DomainError(f"bad edge token {token!r}")
                ops[(int(src), target)] = OPS_BY_NAME[name]
        if len(ops) != EDGE_COUNT:
            raise DomainError(f"duplicate edges in {text!r}")
        return cls(tuple(ops[edge] for edge in EDGES))


def encode(spec: CellSpec) -> int:
    return sum(int(op) * OP_COUNT**k for k, op in enumerate(spec.edge_ops))


def decode(arch_id: int) -> CellSpec:
    if not 0 <= arch_id < SPACE_SIZE:
        raise DomainError(f"arch id {arch_id} outside [0, {SPACE_SIZE - 1}]", arch_id=arch_id)
    ops = []
    for _ in range(EDGE_COUNT):
        arch_id, digit = divmod(arch_id, OP_COUNT)
        ops.append(OpKind(digit))
    return CellSpec(tuple(ops))


def enumerate_space() -> Iterator[int]:
    yield from range(SPACE_SIZE)


def parse_arch(value: int | str) -> int:
    """Accept a decimal ArchId or a cell string and return the ArchId."""
    if isinstance(value, (int, np.integer)):
        decode(int(value))
        return int(value)
    text = str(value).strip()
    if text.isdigit():
        return parse_arch(int(text))
    return encode(CellSpec.from_string(text))


def sample_archs(rng: np.random.Generator, count: int) -> list[int]:
    return [int(a) for a in rng.integers(0, SPACE_SIZE, size=count)]
