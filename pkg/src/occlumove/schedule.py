"""Discretized noise schedule shared by inversion, sampling and noising."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients along a discretized timestep ladder.

    ``alpha_bars[i]`` is the cumulative signal coefficient at ladder index
    ``i`` (0 = clean, ``total_steps`` = noisiest); ``step_indices[i]`` is the
    native timestep the backbone sees for that index.
    """

    alpha_bars: np.ndarray
    step_indices: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        ab = np.asarray(self.alpha_bars, dtype=np.float64)
        object.__setattr__(self, "alpha_bars", ab)
        if ab.ndim != 1 or len(ab) < 3:
            raise ScheduleError("schedule needs at least T=2 steps (3 ladder points)")
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bars[0] must be exactly 1.0 (clean latent)")
        if np.any(np.diff(ab) >= 0):
            raise ScheduleError("alpha_bars must be strictly decreasing")
        if np.any(ab < 0):
            raise ScheduleError("alpha_bars must be non-negative")
        if self.step_indices is None:
            object.__setattr__(self, "step_indices", np.arange(len(ab), dtype=np.int64))
        else:
            si = np.asarray(self.step_indices, dtype=np.int64)
            if si.shape != ab.shape:
                raise ScheduleError("step_indices must match alpha_bars in length")
            object.__setattr__(self, "step_indices", si)

    @property
    def total_steps(self) -> int:
        return len(self.alpha_bars) - 1

    def signal(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bars[t]))

    def noise(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bars[t]))

    def to_dict(self) -> dict:
        return {
            "alpha_bars": self.alpha_bars.tolist(),
            "step_indices": self.step_indices.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(np.asarray(d["alpha_bars"]), np.asarray(d["step_indices"]))

    @classmethod
    def linear_beta(
        cls,
        steps: int,
        native_steps: int = 1000,
        beta_start: float = 0.00085,
        beta_end: float = 0.012,
    ) -> "NoiseSchedule":
        """Ladder of ``steps`` points over a linear-beta native schedule.

        ``beta`` is linear in sqrt space, the stock latent-diffusion choice;
        the ladder keeps index 0 clean (alpha_bar exactly 1).
        """
        if steps < 2:
            raise ScheduleError("steps must be >= 2")
        betas = np.linspace(beta_start**0.5, beta_end**0.5, native_steps) ** 2
        alpha_bar_native = np.cumprod(1.0 - betas)
        ladder = ladder_indices(steps, native_steps)
        alpha_bars = np.concatenate([[1.0], alpha_bar_native[ladder]])
        step_indices = np.concatenate([[0], ladder + 1])
        return cls(alpha_bars, step_indices)


def ladder_indices(steps: int, native_steps: int) -> np.ndarray:
    """Evenly spaced native indices covering (0, native_steps], top included."""
    if steps < 2:
        raise ScheduleError("steps must be >= 2")
    pts = np.linspace(native_steps / steps, native_steps, steps)
    return np.round(pts).astype(np.int64) - 1
