from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occlumove.errors import ContractError, ShapeError
from occlumove.masks import LATENT, PIXEL, Mask, resize_mask_grid


def test_mask_validates_binary():
    with pytest.raises(ContractError):
        Mask(np.full((4, 4), 2, dtype=np.uint8), PIXEL)
    with pytest.raises(ShapeError):
        Mask(np.zeros((4, 6), dtype=np.uint8), PIXEL)
    with pytest.raises(ContractError):
        Mask(np.zeros((4, 4), dtype=np.uint8), "voxel")


def test_to_latent_area_threshold():
    grid = np.zeros((16, 16), dtype=np.uint8)
    grid[0:8, 0:8] = 1          # fully covered latent cell
    grid[8:12, 8:16] = 1        # half covered -> on (>= 0.5)
    grid[0, 8] = 1              # 1/64 covered -> off
    m = Mask(grid, PIXEL).to_latent(8)
    assert m.space == LATENT
    assert m.grid.tolist() == [[1, 0], [0, 1]]


def test_resize_upscale_nearest():
    grid = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    up = resize_mask_grid(grid, 8)
    assert up.shape == (8, 8)
    assert np.array_equal(up[:4, :4], np.ones((4, 4), dtype=np.uint8))
    assert up.sum() == 32


def test_bbox_and_empty():
    grid = np.zeros((10, 10), dtype=np.uint8)
    grid[2:5, 3:9] = 1
    assert Mask(grid, PIXEL).bbox() == (2, 5, 3, 9)
    with pytest.raises(ContractError):
        Mask(np.zeros((4, 4), dtype=np.uint8), PIXEL).bbox()


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_mask_ops_stay_binary(seed):
    rng = np.random.default_rng(seed)
    a = Mask((rng.uniform(size=(12, 12)) < 0.4).astype(np.uint8), PIXEL)
    b = Mask((rng.uniform(size=(12, 12)) < 0.4).astype(np.uint8), PIXEL)
    for m in (a.invert(), a.union(b), a.intersect(b), a.resize(6), a.resize(24)):
        assert set(np.unique(m.grid)).issubset({0, 1})
    assert a.union(b).covers(a)
    assert a.covers(a.intersect(b))
    assert np.array_equal(a.invert().invert().grid, a.grid)
