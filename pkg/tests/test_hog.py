from __future__ import annotations

import numpy as np
import pytest

from src.config import HogConfig
from src.errors import ShapeError
from src.hog import feature_dim, hog_batch, hog_features


def _mk_edges(hw: int = 16, vertical: bool = True) -> np.ndarray:
    img = np.zeros((hw, hw))
    if vertical:
        img[:, hw // 2 :] = 1.0
    else:
        img[hw // 2 :, :] = 1.0
    return img


def test_feature_dim_matches_output() -> None:
    cfg = HogConfig()
    assert feature_dim(32, cfg) == 324
    out = hog_batch(np.random.default_rng(0).random((2, 3, 32, 32)), cfg)
    assert out.shape == (2, 324)


def test_constant_image_has_zero_features() -> None:
    out = hog_features(np.full((3, 16, 16), 0.5), HogConfig())
    assert np.all(out == 0.0)


def test_vertical_edge_votes_into_bin_zero() -> None:
    cfg = HogConfig()
    out = hog_batch(_mk_edges()[None], cfg).reshape(-1, cfg.bins)
    assert out[:, 1:].sum() == pytest.approx(0.0)
    assert out[:, 0].sum() > 0


def test_horizontal_edge_splits_between_middle_bins() -> None:
    cfg = HogConfig()
    out = hog_batch(_mk_edges(vertical=False)[None], cfg).reshape(-1, cfg.bins)
    # 90 degrees sits halfway between the bins centred at 80 and 100
    assert out[:, 4].sum() == pytest.approx(out[:, 5].sum())
    assert out[:, [0, 1, 2, 3, 6, 7, 8]].sum() == pytest.approx(0.0)


def test_block_vectors_have_at_most_unit_norm() -> None:
    cfg = HogConfig()
    out = hog_batch(np.random.default_rng(1).random((3, 3, 16, 16)), cfg)
    blocks = out.reshape(3, -1, cfg.block * cfg.block * cfg.bins)
    assert np.all(np.linalg.norm(blocks, axis=2) <= 1.0 + 1e-9)


def test_image_smaller_than_block_rejected() -> None:
    with pytest.raises(ShapeError):
        hog_batch(np.zeros((1, 3, 8, 8)), HogConfig(cell=8))
    with pytest.raises(ShapeError):
        hog_batch(np.zeros((1, 2, 16, 16)), HogConfig())
