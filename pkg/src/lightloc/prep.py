"""Resampling, log transform, night-center estimation and night-centered windows."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .records import LIGHT_FLOOR, MINUTES_PER_DAY, AlignedWindow, DailyLightRecord, DailyTempRecord

CANONICAL_LIGHT_RES = 3.0
CANONICAL_TEMP_RES = 60.0
HALF_WINDOW_MIN = 540.0
DARK_PERCENTILE = 10.0


def _n_samples(resolution: float) -> int:
    n = MINUTES_PER_DAY / resolution
    if resolution <= 0 or abs(n - round(n)) > 1e-9:
        raise ValueError(f"resolution {resolution} min does not divide a day")
    return int(round(n))


def resample(record, target_resolution: float):
    """Resample a full-day record to ``target_resolution`` minutes per sample.

    Light is block-averaged (or sample-repeated when upsampling by an integer
    factor); temperature is linearly interpolated between interval centers on
    the circular day.
    """
    n_out = _n_samples(target_resolution)
    n_in = len(record.samples)
    if n_out == n_in:
        return record
    x = record.samples
    if isinstance(record, DailyLightRecord):
        if n_in % n_out == 0:
            out = x.reshape(n_out, n_in // n_out).mean(axis=1)
        elif n_out % n_in == 0:
            out = np.repeat(x, n_out // n_in)
        else:
            raise ValueError(f"cannot resample light from {record.resolution} to {target_resolution} min")
    elif isinstance(record, DailyTempRecord):
        t_in = (np.arange(n_in) + 0.5) * record.resolution
        t_out = (np.arange(n_out) + 0.5) * target_resolution
        out = np.interp(t_out, t_in, x, period=MINUTES_PER_DAY)
    else:
        raise TypeError(f"unsupported record type {type(record).__name__}")
    return record.with_samples(out, resolution=float(target_resolution))


def log_light(record: DailyLightRecord, floor: float = LIGHT_FLOOR) -> DailyLightRecord:
    """log10 of the light samples, floored at one sensor LSB."""
    if record.log_scale:
        raise ValueError("record is already log-scale")
    return record.with_samples(np.log10(np.maximum(record.samples, floor)), log_scale=True)


def roll_record(record, shift_samples: int):
    """Circularly delay a record by ``shift_samples`` samples (positive = later)."""
    return record.with_samples(np.roll(record.samples, int(shift_samples)))


def _pearson_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    num = (a * b).sum(axis=1)
    den = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = num / den
    return np.where(den > 0, r, -np.inf)


def symmetry_scores(x: np.ndarray, centers2: np.ndarray, half: int) -> np.ndarray:
    """Pearson symmetry score for candidate centers given in half-sample units.

    A center ``c2`` (= 2 * position) pairs sample ``p - k`` with ``p + k`` for
    integer positions and ``p + 1 - k`` with ``p + k`` for half positions.
    """
    n = len(x)
    # padded copy so every circular window is a contiguous row: xx[j + half] = x[j % n]
    xx = np.concatenate([x[-half:], x, x[:half + 1]])
    rows = sliding_window_view(xx, half)
    base = centers2 // 2
    odd = centers2 % 2
    right = rows[(base + 1) % n + half]
    left = rows[(base + odd - half) % n + half][:, ::-1]
    return _pearson_rows(left, right)


def night_center_xcorr(record: DailyLightRecord) -> float:
    """Night center (UTC minutes) by maximal mirror symmetry of the log-light day.

    Candidates are the dark samples (at or below the 10th percentile of the day)
    and the half-sample points between them. Each candidate splits the
    circular record into two 9 h halves; the score is the Pearson correlation
    of the reversed left half against the right half. The best candidate is
    refined by a parabola through its neighbors on the half-sample lattice.
    """
    if not record.log_scale:
        raise ValueError("night_center_xcorr expects a log-scale record")
    x = record.samples
    n = len(x)
    res = record.resolution
    half = int(round(HALF_WINDOW_MIN / res))
    dark = np.flatnonzero(x <= np.percentile(x, DARK_PERCENTILE))
    if len(dark) == 0 or len(dark) == n or np.ptp(x) == 0:
        raise ValueError("record has no distinguishable dark period")
    centers2 = np.unique(np.concatenate([2 * dark, 2 * dark + 1]))
    scores = symmetry_scores(x, centers2, half)
    best = int(np.argmax(scores))
    pos2 = float(centers2[best])
    # parabolic refinement needs both lattice neighbors
    c2 = centers2[best]
    nb = {int(c): s for c, s in zip(centers2, scores)}
    lo, hi = nb.get(int(c2) - 1), nb.get(int(c2) + 1)
    if lo is None or hi is None:
        extra = symmetry_scores(x, np.array([(c2 - 1) % (2 * n), (c2 + 1) % (2 * n)]), half)
        lo = extra[0] if lo is None else lo
        hi = extra[1] if hi is None else hi
    s0 = scores[best]
    denom = lo - 2.0 * s0 + hi
    if np.isfinite(denom) and denom < 0:
        pos2 += float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))
    position = pos2 / 2.0
    return float(((position + 0.5) * res) % MINUTES_PER_DAY)


def window_length(resolution: float) -> int:
    return 2 * int(round(HALF_WINDOW_MIN / resolution)) + 1


def center_index(center: float, resolution: float) -> tuple[int, float]:
    """Nearest sample index to a center time and the unrepresented remainder (minutes)."""
    pos = center / resolution - 0.5
    idx = int(np.floor(pos + 0.5))
    return idx, (pos - idx) * resolution


def time_shift(record, center: float) -> AlignedWindow:
    """Circularly roll ``record`` so ``center`` sits at the window midpoint and cut +/- 9 h."""
    if not 0 <= center < MINUTES_PER_DAY:
        center = center % MINUTES_PER_DAY
    res = record.resolution
    idx, remainder = center_index(center, res)
    return window_at(record.samples, res, idx, center=center, remainder=remainder,
                     modality="light" if isinstance(record, DailyLightRecord) else "temperature")


def window_at(samples: np.ndarray, resolution: float, idx: int, center: float | None = None,
              remainder: float = 0.0, modality: str = "light") -> AlignedWindow:
    half = int(round(HALF_WINDOW_MIN / resolution))
    take = (idx + np.arange(-half, half + 1)) % len(samples)
    if center is None:
        center = ((idx + 0.5) * resolution) % MINUTES_PER_DAY
    return AlignedWindow(
        samples=np.asarray(samples)[take],
        resolution=resolution,
        night_center_used=float(center),
        remainder_min=float(remainder),
        modality=modality,
    )
