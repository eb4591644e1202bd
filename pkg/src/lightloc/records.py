"""Daily sensor records shared across the pipeline."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace

import numpy as np

from .geo import GeoCoord

MINUTES_PER_DAY = 1440

LIGHT_SOURCES = ("sensor", "volunteer", "synthetic", "synthesized-shift")
TEMP_SOURCES = ("sensor", "station", "kriged", "synthetic")

# Sensor LSB of the light logger, lux. Log transform floors at this value.
LIGHT_FLOOR = 0.1

DateStamp = dt.date


def as_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value))


def _check_full_day(samples: np.ndarray, resolution: float) -> None:
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if abs(len(samples) * resolution - MINUTES_PER_DAY) > 1e-6:
        raise ValueError(f"{len(samples)} samples at {resolution} min do not span one day")


@dataclass(frozen=True)
class DailyLightRecord:
    """One UTC day of light samples. Sample ``i`` covers minutes [i*res, (i+1)*res)."""

    date: dt.date
    samples: np.ndarray
    resolution: float = 3.0
    coord: GeoCoord | None = None
    source: str = "sensor"
    log_scale: bool = False
    denoised: bool = False
    site_id: str | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).copy()
        _check_full_day(samples, self.resolution)
        if self.source not in LIGHT_SOURCES:
            raise ValueError(f"unknown light source {self.source!r}")
        if not self.log_scale and np.any(samples < 0):
            raise ValueError("linear-scale light samples must be nonnegative")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "date", as_date(self.date))

    def with_samples(self, samples, **changes) -> "DailyLightRecord":
        return replace(self, samples=samples, **changes)


@dataclass(frozen=True)
class DailyTempRecord:
    """One UTC day of temperature samples in degrees Celsius."""

    date: dt.date
    samples: np.ndarray
    resolution: float = 60.0
    coord: GeoCoord | None = None
    source: str = "sensor"
    site_id: str | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).copy()
        _check_full_day(samples, self.resolution)
        if self.source not in TEMP_SOURCES:
            raise ValueError(f"unknown temperature source {self.source!r}")
        if np.any(samples < -60) or np.any(samples > 60):
            raise ValueError("temperature outside [-60, 60] C")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "date", as_date(self.date))

    def with_samples(self, samples, **changes) -> "DailyTempRecord":
        return replace(self, samples=samples, **changes)


@dataclass(frozen=True)
class AlignedWindow:
    """Samples centered on a night center, +/- 9 hours.

    ``remainder_min`` is the part of the requested center that the
    nearest-sample roll could not represent.
    """

    samples: np.ndarray
    resolution: float
    night_center_used: float
    remainder_min: float = 0.0
    modality: str = "light"
    meta: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.samples)
