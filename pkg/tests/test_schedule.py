from __future__ import annotations

import numpy as np
import pytest

from occlumove.schedule import NoiseSchedule, ScheduleError, ladder_indices


def test_requires_strictly_decreasing_and_clean_origin():
    with pytest.raises(ScheduleError):
        NoiseSchedule(np.array([1.0, 0.5, 0.5]))
    with pytest.raises(ScheduleError):
        NoiseSchedule(np.array([0.9, 0.5, 0.2]))
    with pytest.raises(ScheduleError):
        NoiseSchedule(np.array([1.0, 0.5]))  # T < 2


def test_zero_endpoint_allowed():
    s = NoiseSchedule(np.array([1.0, 0.5, 0.0]))
    assert s.total_steps == 2
    assert s.signal(2) == 0.0
    assert s.noise(2) == 1.0


def test_linear_beta_shape_and_monotonicity():
    s = NoiseSchedule.linear_beta(50)
    assert s.total_steps == 50
    assert s.alpha_bars[0] == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.step_indices[-1] == 1000


def test_ladder_top_included():
    lad = ladder_indices(10, 1000)
    assert lad[-1] == 999
    assert len(lad) == 10
    with pytest.raises(ScheduleError):
        ladder_indices(1, 1000)


def test_round_trip_dict():
    s = NoiseSchedule.linear_beta(10)
    s2 = NoiseSchedule.from_dict(s.to_dict())
    assert np.array_equal(s.alpha_bars, s2.alpha_bars)
    assert np.array_equal(s.step_indices, s2.step_indices)
