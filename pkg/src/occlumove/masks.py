"""Binary spatial masks in pixel or latent space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError

PIXEL = "pixel"
LATENT = "latent"


def _binarize_fraction(frac: np.ndarray) -> np.ndarray:
    return (frac >= 0.5).astype(np.uint8)


def resize_mask_grid(grid: np.ndarray, out_side: int) -> np.ndarray:
    """Resize a binary grid to ``out_side``.

    Integral downscales use exact area averaging then a 0.5 threshold;
    integral upscales are nearest-neighbor; anything else goes through a
    bilinear resize of the float field and the same threshold.
    """
    side = grid.shape[0]
    if out_side == side:
        return grid.astype(np.uint8).copy()
    if side % out_side == 0:
        f = side // out_side
        frac = grid.astype(np.float64).reshape(out_side, f, out_side, f).mean(axis=(1, 3))
        return _binarize_fraction(frac)
    if out_side % side == 0:
        f = out_side // side
        return np.repeat(np.repeat(grid, f, axis=0), f, axis=1).astype(np.uint8)
    field = kernels.bilinear_resize(grid.astype(np.float64)[None], out_side, out_side)[0]
    return _binarize_fraction(field)


@dataclass(frozen=True)
class Mask:
    """Binary square field; ``space`` tells whether sides are pixels or latent cells."""

    grid: np.ndarray
    space: str

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ShapeError(f"mask must be a square 2D grid, got {g.shape}")
        if self.space not in (PIXEL, LATENT):
            raise ContractError(f"unknown mask space {self.space!r}")
        vals = np.unique(g)
        if not np.all(np.isin(vals, (0, 1))):
            raise ContractError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "grid", g.astype(np.uint8))

    @property
    def side(self) -> int:
        return self.grid.shape[0]

    @property
    def area(self) -> int:
        return int(self.grid.sum())

    def is_empty(self) -> bool:
        return self.area == 0

    def invert(self) -> "Mask":
        return Mask((1 - self.grid).astype(np.uint8), self.space)

    def union(self, other: "Mask") -> "Mask":
        self._check_peer(other)
        return Mask(np.maximum(self.grid, other.grid), self.space)

    def intersect(self, other: "Mask") -> "Mask":
        self._check_peer(other)
        return Mask(np.minimum(self.grid, other.grid), self.space)

    def covers(self, other: "Mask") -> bool:
        self._check_peer(other)
        return bool(np.all(self.grid >= other.grid))

    def resize(self, out_side: int) -> "Mask":
        return Mask(resize_mask_grid(self.grid, out_side), self.space)

    def to_latent(self, factor: int = 8) -> "Mask":
        if self.space != PIXEL:
            raise ContractError("to_latent expects a pixel-space mask")
        if self.side % factor != 0:
            raise ShapeError(f"mask side {self.side} not divisible by {factor}")
        return Mask(resize_mask_grid(self.grid, self.side // factor), LATENT)

    def bbox(self) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1), half-open; raises on an empty mask."""
        if self.is_empty():
            raise ContractError("mask is empty")
        rows = np.flatnonzero(self.grid.any(axis=1))
        cols = np.flatnonzero(self.grid.any(axis=0))
        return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1

    def _check_peer(self, other: "Mask") -> None:
        if other.space != self.space or other.side != self.side:
            raise ContractError("mask spaces/sides do not match")
