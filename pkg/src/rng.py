"""Named random streams.

Every random draw in an experiment comes from a generator seeded with
``sha256(f"{global_seed}:{purpose}:{arch_id}")`` truncated to 64 bits, so a
replay on another machine sees the same numbers.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(global_seed: int, purpose: str, arch_id: int | None = None) -> int:
    key = f"{global_seed}:{purpose}:{'-' if arch_id is None else arch_id}"
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def stream(global_seed: int, purpose: str, arch_id: int | None = None) -> np.random.Generator:
    return np.random.default_rng(derive_seed(global_seed, purpose, arch_id))
