"""Histogram-of-oriented-gradients features for the shallow threshold learner."""
from __future__ import annotations

import numpy as np

from src.config import HogConfig
from src.errors import ShapeError

LUMA = np.array([0.299, 0.587, 0.114])


def _grayscale(images: np.ndarray) -> np.ndarray:
    if images.ndim == 3:
        return images.astype(np.float64)
    if images.ndim == 4 and images.shape[1] == 3:
        return np.tensordot(images.astype(np.float64), LUMA, axes=([1], [0]))
    raise ShapeError(f"expected (N, 3, H, W) or (N, H, W) images, got {images.shape}")


def hog_batch(images: np.ndarray, cfg: HogConfig) -> np.ndarray:
    """HoG vectors for a batch of RGB (N, 3, H, W) or gray (N, H, W) images."""
    gray = _grayscale(images)
    n, h, w = gray.shape
    cells_y, cells_x = h // cfg.cell, w // cfg.cell
    if cells_y < cfg.block or cells_x < cfg.block:
        raise ShapeError(f"{h}x{w} image is smaller than one {cfg.block}x{cfg.block}-cell block of {cfg.cell}px cells")

    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, :, 1:-1] = gray[:, :, 2:] - gray[:, :, :-2]
    gy[:, 1:-1, :] = gray[:, 2:, :] - gray[:, :-2, :]
    magnitude = np.hypot(gx, gy)
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)

    # bin b is centred at b * width; votes split linearly between neighbours
    width = 180.0 / cfg.bins
    pos = angle / width
    lower = np.floor(pos)
    frac = pos - lower
    lo = lower.astype(np.int64) % cfg.bins
    hi = (lo + 1) % cfg.bins

    hh, ww = cells_y * cfg.cell, cells_x * cfg.cell
    hist = np.zeros((n, cells_y, cells_x, cfg.bins))
    for b in range(cfg.bins):
        vote = magnitude * (1.0 - frac) * (lo == b) + magnitude * frac * (hi == b)
        vote = vote[:, :hh, :ww].reshape(n, cells_y, cfg.cell, cells_x, cfg.cell)
        hist[..., b] = vote.sum(axis=(2, 4))

    blocks = []
    for i in range(cells_y - cfg.block + 1):
        for j in range(cells_x - cfg.block + 1):
            v = hist[:, i : i + cfg.block, j : j + cfg.block, :].reshape(n, -1)
            blocks.append(v / np.sqrt((v * v).sum(axis=1, keepdims=True) + cfg.eps**2))
    return np.concatenate(blocks, axis=1)


def hog_features(image: np.ndarray, cfg: HogConfig) -> np.ndarray:
    return hog_batch(image[None], cfg)[0]


def feature_dim(hw: int, cfg: HogConfig) -> int:
    per_side = hw // cfg.cell - cfg.block + 1
    return per_side * per_side * cfg.block * cfg.block * cfg.bins
