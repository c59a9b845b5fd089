"""Frame construction from interpolated series.

A frame spans 13 consecutive months [i, i+12]; its input matrix encodes the
first 12 of them and its prediction target sits one month past the span, at
i+13. With m the month of the second-to-last real observation and n the month
of the last one:

* first-stage frames slide i one month at a time while i+12 <= m-1 and the
  target month i+13 <= m, so neither the window nor the target ever touches
  the uninterpolated zone (m, n]. `real_count` counts genuinely observed
  months within the 13-month span (interpolated fills never count), and
  frames with real_count < certain are dropped.
* the second-stage frame is the single span [m-12, m] with target value at
  month n and gap g = n - m - 1. It is rejected when g exceeds 6 (half the
  frame width) and absent when the span would start before the first
  observation. g = 0 (n = m+1) degenerates to first-stage geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Gender, LabParameter, LabSeries
from .encoding import FRAME_WIDTH, encode_frame, normalize

FRAME_SPAN = FRAME_WIDTH + 1  # inclusive month span covered by one frame
MAX_GAP = FRAME_WIDTH // 2


@dataclass
class Frame:
    patient_id: str
    parameter: LabParameter
    input: np.ndarray  # (12, 5)
    target: float  # normalized
    gap: int
    real_count: int
    window_start: int


def _dense_lookup(series: LabSeries) -> dict[int, tuple[float, bool]]:
    return {o.month: (o.value, o.is_real) for o in series.observations}


def _make_frame(
    series: LabSeries,
    lookup: dict[int, tuple[float, bool]],
    age_at_start: float,
    gender: Gender,
    start: int,
    target_month: int,
    gap: int,
) -> Frame:
    window = range(start, start + FRAME_WIDTH)
    values = [lookup[month][0] for month in window]
    flags = [1.0 if lookup[month][1] else 0.0 for month in window]
    real_count = sum(lookup[month][1] for month in range(start, start + FRAME_SPAN))
    age = age_at_start + start / 12.0
    matrix = encode_frame(series.patient_id, series.parameter, age, gender, values, flags)
    return Frame(
        patient_id=series.patient_id,
        parameter=series.parameter,
        input=matrix,
        target=normalize(lookup[target_month][0]),
        gap=gap,
        real_count=real_count,
        window_start=start,
    )


def build_stage1_frames(
    series: LabSeries, age_at_start: float, gender: Gender, certain: int
) -> list[Frame]:
    """All sliding supervised frames of an interpolated series.

    `certain` in [0, 5] is the minimum number of real observations a frame's
    span must contain. Short series yield an empty list.
    """
    real = series.real_months()
    if len(real) < 3:
        return []
    lookup = _dense_lookup(series)
    first, m = real[0], real[-2]
    frames = []
    for start in range(first, m - FRAME_WIDTH):
        frame = _make_frame(series, lookup, age_at_start, gender, start, start + FRAME_SPAN, 0)
        if frame.real_count >= certain:
            frames.append(frame)
    return frames


def build_stage2_frame(series: LabSeries, age_at_start: float, gender: Gender) -> Frame | None:
    """The isolated rollout frame ending at the second-to-last real month."""
    real = series.real_months()
    if len(real) < 2:
        return None
    lookup = _dense_lookup(series)
    first, m, n = real[0], real[-2], real[-1]
    start = m - FRAME_WIDTH
    if start < first:
        return None
    gap = n - m - 1
    if gap > MAX_GAP:
        return None
    # the input months [m-12, m-1] all lie in the interpolated zone
    if any(month not in lookup for month in range(start, m)):
        raise ValueError(
            f"{series.patient_id}/{series.parameter.value}: series must be interpolated first"
        )
    return _make_frame(series, lookup, age_at_start, gender, start, n, gap)
