from __future__ import annotations

import numpy as np
import pytest

from occlumove.backbone.toy import ToyBackbone


def block_constant_image(side: int, seed: int = 0, block: int = 8) -> np.ndarray:
    """Random image constant on block x block cells (exact under the toy codec).
    Values sit on the uint8 grid so PNG round trips are lossless."""
    rng = np.random.default_rng(seed)
    coarse = np.rint(rng.uniform(0.0, 1.0, (side // block, side // block, 3)) * 255) / 255
    return np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)


def smooth_image(side: int, seed: int = 0, coarse: int = 16) -> np.ndarray:
    """Smooth random gradients (bilinear-lifted coarse field) on the uint8 grid;
    the kind of content codec reconstruction tolerances are stated for."""
    from occlumove import kernels

    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 1.0, (3, coarse, coarse))
    up = kernels.bilinear_resize(base, side, side).transpose(1, 2, 0)
    return np.rint(np.clip(up, 0.0, 1.0) * 255) / 255


def disk_mask_grid(side: int, center: tuple[int, int], radius: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    return (((yy - center[0]) ** 2 + (xx - center[1]) ** 2) <= radius**2).astype(np.uint8)


@pytest.fixture(scope="session")
def toy():
    return ToyBackbone(seed=3)


@pytest.fixture(scope="session")
def donut_cond(toy):
    return toy.embed_prompt("A photo of donut")
