"""Point-to-mask helpers for the interactive editor.

The default segmenter is a deterministic color-similarity flood fill: a
stand-in so the editor works without a learned model. Real segmentation
backends can be plugged in behind the same callable signature.
"""
from __future__ import annotations

from collections import deque

import numpy as np

from .errors import ContractError

DEFAULT_TOLERANCE = 0.12


def flood_fill_segment(image: np.ndarray, point_xy: tuple[int, int],
                       tolerance: float = DEFAULT_TOLERANCE) -> np.ndarray:
    """Region-grow from the clicked pixel over color-similar 4-neighbors.

    Similarity is Euclidean RGB distance to the *seed* color, which keeps the
    result independent of visit order (deterministic for a given click).
    Returns an (H, W) binary grid matching the image dims.
    """
    h, w = image.shape[:2]
    x, y = point_xy
    if not (0 <= x < w and 0 <= y < h):
        raise ContractError(f"click {point_xy} outside image {w}x{h}")
    seed = image[y, x].astype(np.float64)
    dist = np.sqrt(np.sum((image.astype(np.float64) - seed) ** 2, axis=2))
    similar = dist <= tolerance

    grid = np.zeros((h, w), dtype=np.uint8)
    queue: deque[tuple[int, int]] = deque([(y, x)])
    grid[y, x] = 1
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not grid[nr, nc] and similar[nr, nc]:
                grid[nr, nc] = 1
                queue.append((nr, nc))
    return grid


SEGMENTERS = {"flood": flood_fill_segment}
