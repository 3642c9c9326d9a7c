from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
import os
from pathlib import Path
import struct
from typing import Iterable, Sequence

import numpy as np

from src.config import SyntheticConfig
from src.errors import BalanceError, EmptyDatasetError, FormatError
from src.logger import get_logger

logger = get_logger("datasets")

CIFAR_RECORD = 3073
CIFAR_HW = 32
DATASET_MAGIC = b"FEARDS01"
# magic, N, C, H, W, num_classes, seed, encoding, name length
_HEADER = struct.Struct("<8sIIIIIQBH")
ENCODINGS = ("unit", "gaussian")
# Gaussian pixels are stored as round(128 + 32 * x), i.e. +-4 sigma in a byte.
GAUSS_OFFSET = 128.0
GAUSS_SCALE = 32.0


@dataclass(frozen=True, eq=False)
class ImageDataset:
    name: str
    pixels: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int
    seed: int
    encoding: str = "unit"
    channel_mean: tuple[float, ...] | None = None
    channel_std: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        n = self.pixels.shape[0]
        if self.pixels.ndim != 4 or self.pixels.dtype != np.uint8:
            raise FormatError("pixels must be a uint8 array of shape (N, C, H, W)")
        if len(self.labels) != n:
            raise FormatError(f"{len(self.labels)} labels for {n} images")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels must lie in [0, {self.num_classes})")
        both = np.concatenate([self.train_idx, self.test_idx])
        if len(np.unique(both)) != len(both) or len(both) != n:
            raise FormatError("train/test splits must be disjoint and cover the dataset")
        if self.encoding not in ENCODINGS:
            raise FormatError(f"unknown pixel encoding {self.encoding!r}")

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def image_hw(self) -> int:
        return int(self.pixels.shape[2])

    def decoded(self) -> np.ndarray:
        """Pixel values before any standardisation, as float64."""
        values = self.pixels.astype(np.float64)
        if self.encoding == "gaussian":
            return (values - GAUSS_OFFSET) / GAUSS_SCALE
        return values / 255.0

    @cached_property
    def images(self) -> np.ndarray:
        values = self.decoded()
        if self.channel_mean is not None and self.channel_std is not None:
            mean = np.asarray(self.channel_mean)[None, :, None, None]
            std = np.asarray(self.channel_std)[None, :, None, None]
            values = (values - mean) / std
        return values.astype(np.float32)

    @property
    def train_images(self) -> np.ndarray:
        return self.images[self.train_idx]

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[self.train_idx]

    @property
    def test_images(self) -> np.ndarray:
        return self.images[self.test_idx]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[self.test_idx]

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()


def _labelers(cfg: SyntheticConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    d_in = cfg.channels * cfg.hw * cfg.hw
    hidden = d_in
    nets = []
    for _ in range(cfg.num_labelers):
        w1 = rng.normal(0.0, np.sqrt(1.0 / d_in), size=(hidden, d_in)).astype(np.float32)
        w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden,)).astype(np.float32)
        nets.append((w1, w2))
    return nets


def _label(flat: np.ndarray, labelers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    scores = np.stack([np.maximum(flat @ w1.T, 0.0) @ w2 for w1, w2 in labelers], axis=1)
    return scores.argmax(axis=1)


def _draw(cfg: SyntheticConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    x = rng.standard_normal(size=(count, cfg.channels, cfg.hw, cfg.hw))
    return np.clip(np.round(GAUSS_OFFSET + GAUSS_SCALE * x), 0, 255).astype(np.uint8)


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> ImageDataset:
    """Gaussian images labelled by the argmax of randomly initialised
    two-layer networks."""
    rng = np.random.default_rng(seed)
    labelers = _labelers(cfg, rng)

    def label(pixels: np.ndarray) -> np.ndarray:
        flat = ((pixels.astype(np.float32) - GAUSS_OFFSET) / GAUSS_SCALE).reshape(len(pixels), -1)
        return _label(flat, labelers)

    if not cfg.balance_classes:
        pixels = _draw(cfg, rng, cfg.n_total)
        labels = label(pixels)
    else:
        per_class = cfg.n_total // cfg.num_classes
        kept_pixels: list[np.ndarray] = []
        kept_labels: list[int] = []
        counts = np.zeros(cfg.num_classes, dtype=np.int64)
        drawn = 0
        budget = cfg.n_total * cfg.max_draw_factor
        while counts.min() < per_class:
            if drawn >= budget:
                raise BalanceError(
                    f"class balancing did not finish within {budget} draws", counts=counts.tolist()
                )
            chunk = _draw(cfg, rng, cfg.n_total)
            drawn += len(chunk)
            for img, lab in zip(chunk, label(chunk)):
                if counts[lab] < per_class:
                    counts[lab] += 1
                    kept_pixels.append(img)
                    kept_labels.append(int(lab))
        pixels = np.stack(kept_pixels)
        labels = np.asarray(kept_labels)
        logger.info("synthetic_balanced | draws=%d per_class=%d", drawn, per_class)

    order = rng.permutation(len(labels))
    pixels, labels = pixels[order], labels[order].astype(np.int64)
    idx = np.arange(len(labels))
    return ImageDataset(
        name="synthetic",
        pixels=np.ascontiguousarray(pixels),
        labels=labels,
        train_idx=idx[: cfg.n_train],
        test_idx=idx[cfg.n_train :],
        num_classes=cfg.num_classes,
        seed=seed,
        encoding="gaussian",
    )


def _read_cifar_records(paths: Iterable[str | os.PathLike[str]]) -> tuple[np.ndarray, np.ndarray]:
    pixels: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for path in paths:
        raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            raise FormatError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}", path=str(path))
        records = raw.reshape(-1, CIFAR_RECORD)
        if records.size and records[:, 0].max() > 9:
            raise FormatError(f"{path}: label byte above 9", path=str(path))
        labels.append(records[:, 0].astype(np.int64))
        pixels.append(records[:, 1:].reshape(-1, 3, CIFAR_HW, CIFAR_HW))
    if not pixels:
        return np.zeros((0, 3, CIFAR_HW, CIFAR_HW), dtype=np.uint8), np.zeros(0, dtype=np.int64)
    return np.concatenate(pixels), np.concatenate(labels)


def load_cifar10_binary(
    paths: Sequence[str | os.PathLike[str]],
    test_paths: Sequence[str | os.PathLike[str]] = (),
) -> ImageDataset:
    """Read CIFAR-10 binary batches; ``paths`` form the train split and
    ``test_paths`` the test split, each concatenated in order."""
    if not paths:
        raise EmptyDatasetError("no CIFAR-10 files given")
    train_pixels, train_labels = _read_cifar_records(paths)
    test_pixels, test_labels = _read_cifar_records(test_paths)
    n_train, n_test = len(train_labels), len(test_labels)
    if n_train == 0:
        raise EmptyDatasetError("CIFAR-10 files contain no records")
    return ImageDataset(
        name="cifar10",
        pixels=np.concatenate([train_pixels, test_pixels]),
        labels=np.concatenate([train_labels, test_labels]),
        train_idx=np.arange(n_train),
        test_idx=np.arange(n_train, n_train + n_test),
        num_classes=10,
        seed=0,
    )


def subset(ds: ImageDataset, limit_train: int = 0, limit_test: int = 0) -> ImageDataset:
    """Keep the first ``limit_*`` members of each split (0 keeps all)."""
    train_idx = ds.train_idx[:limit_train] if limit_train else ds.train_idx
    test_idx = ds.test_idx[:limit_test] if limit_test else ds.test_idx
    keep = np.concatenate([train_idx, test_idx])
    return ImageDataset(
        name=ds.name,
        pixels=ds.pixels[keep],
        labels=ds.labels[keep],
        train_idx=np.arange(len(train_idx)),
        test_idx=np.arange(len(train_idx), len(keep)),
        num_classes=ds.num_classes,
        seed=ds.seed,
        encoding=ds.encoding,
    )


def normalize(ds: ImageDataset) -> ImageDataset:
    """Per-channel standardisation with train-split statistics."""
    train = ds.decoded()[ds.train_idx]
    mean = train.mean(axis=(0, 2, 3))
    std = train.std(axis=(0, 2, 3))
    for channel in np.flatnonzero(std == 0):
        logger.warning("zero_channel_variance | dataset=%s channel=%d divisor=1", ds.name, channel)
    std = np.where(std == 0, 1.0, std)
    return replace(ds, channel_mean=tuple(float(v) for v in mean), channel_std=tuple(float(v) for v in std))


def save_dataset(ds: ImageDataset, path: str | os.PathLike[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, c, h, w = ds.pixels.shape
    name = ds.name.encode("utf-8")
    split = np.zeros(n, dtype=np.uint8)
    split[ds.test_idx] = 1
    header = _HEADER.pack(DATASET_MAGIC, n, c, h, w, ds.num_classes, ds.seed, ENCODINGS.index(ds.encoding), len(name))
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(name)
        fh.write(ds.labels.astype(np.uint8).tobytes())
        fh.write(split.tobytes())
        fh.write(np.ascontiguousarray(ds.pixels).tobytes())
    return path


def load_dataset(path: str | os.PathLike[str]) -> ImageDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, c, h, w, num_classes, seed, encoding, name_len = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    offset = _HEADER.size
    expected = offset + name_len + 2 * n + n * c * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    name = raw[offset : offset + name_len].decode("utf-8")
    offset += name_len
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset).astype(np.int64)
    split = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset + n)
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=offset + 2 * n).reshape(n, c, h, w).copy()
    return ImageDataset(
        name=name,
        pixels=pixels,
        labels=labels,
        train_idx=np.flatnonzero(split == 0),
        test_idx=np.flatnonzero(split == 1),
        num_classes=num_classes,
        seed=seed,
        encoding=ENCODINGS[encoding],
    )
