"""Low-precision solar geometry and the synthetic light/temperature generator.

Solar position follows the NOAA "general solar position" series in the
fractional year (declination and equation of time), which is good to about
a minute for sunrise and sunset at mid latitudes.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .geo import GeoCoord
from .records import LIGHT_FLOOR, MINUTES_PER_DAY, DailyLightRecord, DailyTempRecord

# Apparent horizon for sunrise/sunset: refraction plus solar semi-diameter.
HORIZON_DEG = -0.833
CIVIL_TWILIGHT_DEG = -6.0

# Clear-sky light model, lux.
NOON_SCALE_LUX = 1.0e5
HORIZON_LUX = 500.0
TWILIGHT_TAU_DEG = 1.2
CLEAR_SKY_EXPONENT = 1.2

NOISE_KINDS = ("none", "cloud-attenuation", "sensor-dropout")


class PolarDayError(ValueError):
    """The sun does not cross the horizon on the requested date."""


def _days_in_year(year: int) -> int:
    return 366 if (year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)) else 365


def fractional_year(date: dt.date, t_min) -> np.ndarray:
    """Fractional year angle (radians) at UTC minute ``t_min`` of ``date``."""
    doy = date.timetuple().tm_yday
    hours = np.asarray(t_min, dtype=np.float64) / 60.0
    return 2.0 * np.pi / _days_in_year(date.year) * (doy - 1 + (hours - 12.0) / 24.0)


def equation_of_time(gamma) -> np.ndarray:
    """Equation of time in minutes."""
    g = np.asarray(gamma, dtype=np.float64)
    return 229.18 * (
        0.000075
        + 0.001868 * np.cos(g)
        - 0.032077 * np.sin(g)
        - 0.014615 * np.cos(2 * g)
        - 0.040849 * np.sin(2 * g)
    )


def declination(gamma) -> np.ndarray:
    """Solar declination in radians."""
    g = np.asarray(gamma, dtype=np.float64)
    return (
        0.006918
        - 0.399912 * np.cos(g)
        + 0.070257 * np.sin(g)
        - 0.006758 * np.cos(2 * g)
        + 0.000907 * np.sin(2 * g)
        - 0.002697 * np.cos(3 * g)
        + 0.00148 * np.sin(3 * g)
    )


def solar_elevation(coord: GeoCoord, date: dt.date, t_min) -> np.ndarray:
    """Solar elevation angle in degrees at UTC minute(s) ``t_min`` of ``date``.

    ``t_min`` may lie outside [0, 1440); the fractional year is continuous.
    """
    t = np.asarray(t_min, dtype=np.float64)
    gamma = fractional_year(date, t)
    decl = declination(gamma)
    true_solar_time = t + equation_of_time(gamma) + 4.0 * coord.lon
    hour_angle = np.deg2rad(true_solar_time / 4.0 - 180.0)
    lat = np.deg2rad(coord.lat)
    cos_zen = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(hour_angle)
    return 90.0 - np.rad2deg(np.arccos(np.clip(cos_zen, -1.0, 1.0)))


def solar_noon_utc(coord: GeoCoord, date: dt.date) -> float:
    """UTC minute of local solar noon on ``date`` (may fall outside [0, 1440))."""
    noon = 720.0 - 4.0 * coord.lon
    for _ in range(3):
        noon = 720.0 - 4.0 * coord.lon - float(equation_of_time(fractional_year(date, noon)))
    return noon


@dataclass(frozen=True)
class SolarDay:
    coord: GeoCoord
    date: dt.date
    sunrise_utc: float
    sunset_utc: float
    night_center_utc: float
    night_length_min: float


def _crossing(coord, date, lo, hi, horizon):
    f = lambda t: float(solar_elevation(coord, date, t)) - horizon
    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        raise PolarDayError(f"no horizon crossing at {coord} on {date}")
    return brentq(f, lo, hi, xtol=1e-6)


def solar_day(coord: GeoCoord, date: dt.date, horizon: float = HORIZON_DEG) -> SolarDay:
    """Sunset on ``date`` (local solar day), the following sunrise, and the night center.

    All times are UTC minutes reduced modulo 1440.
    """
    noon = solar_noon_utc(coord, date)
    midnight = noon + 720.0
    sunset = _crossing(coord, date, noon, midnight, horizon)
    sunrise = _crossing(coord, date, midnight, midnight + 720.0, horizon)
    center = 0.5 * (sunset + sunrise)
    return SolarDay(
        coord=coord,
        date=date,
        sunrise_utc=sunrise % MINUTES_PER_DAY,
        sunset_utc=sunset % MINUTES_PER_DAY,
        night_center_utc=center % MINUTES_PER_DAY,
        night_length_min=sunrise - sunset,
    )


def night_center_astro(coord: GeoCoord, date: dt.date) -> float:
    """Midpoint between the date's sunset and the next sunrise, UTC minutes mod 1440."""
    return solar_day(coord, date).night_center_utc


def day_length_hours(lat, date: dt.date, lon: float = -90.0, horizon: float = HORIZON_DEG) -> np.ndarray:
    """Closed-form day length (hours) from the sunrise hour angle, at local noon's declination.

    Vectorized over ``lat``; polar day/night saturate at 24/0.
    """
    noon = solar_noon_utc(GeoCoord(0.0, lon), date)
    decl = float(declination(fractional_year(date, noon)))
    phi = np.deg2rad(np.asarray(lat, dtype=np.float64))
    cos_h = (np.sin(np.deg2rad(horizon)) - np.sin(phi) * np.sin(decl)) / (np.cos(phi) * np.cos(decl))
    h = np.arccos(np.clip(cos_h, -1.0, 1.0))
    return 2.0 * np.rad2deg(h) / 15.0


# --------------------------------------------------------------------------- #
# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    """Settings of the synthetic oracle.

    ``noise_kind`` and ``noise_level`` drive the stochastic per-record noise of
    both modalities; ``"none"`` switches all of it off. The weather field is
    a deterministic, spatially smooth daily temperature anomaly shared by every
    site on a date and is not considered noise.
    """

    noise_kind: str = "none"
    noise_level: float = 0.0
    rng_seed: int = 0
    light_resolution_min: float = 3.0
    temp_resolution_min: float = 60.0
    weather_seed: int = 0
    weather_amplitude_c: float = 2.0
    temp_noise_c: float = 0.3
    temp_offset_c: float = 0.5

    def __post_init__(self):
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        for res in (self.light_resolution_min, self.temp_resolution_min):
            n = MINUTES_PER_DAY / res
            if res <= 0 or abs(n - round(n)) > 1e-9:
                raise ValueError(f"resolution {res} min does not divide a day")


def record_rng(seed: int, coord: GeoCoord, date: dt.date, stream: int = 0) -> np.random.Generator:
    """Per-record generator derived from (master seed, site, date, stream)."""
    site = (int(round((coord.lat + 90.0) * 1e4)), int(round((coord.lon + 180.0) * 1e4)))
    return np.random.default_rng(np.random.SeedSequence([int(seed), *site, date.toordinal(), stream]))


def clear_sky_lux(elevation) -> np.ndarray:
    """Clear-sky irradiance: power law of sin(elevation) by day, exponential tail in
    twilight, exactly zero at or below civil twilight."""
    e = np.asarray(elevation, dtype=np.float64)
    day = NOON_SCALE_LUX * np.sin(np.deg2rad(np.clip(e, 0.0, 90.0))) ** CLEAR_SKY_EXPONENT + HORIZON_LUX
    tail = HORIZON_LUX * np.exp(np.clip(e, CIVIL_TWILIGHT_DEG, 0.0) / TWILIGHT_TAU_DEG)
    return np.where(e > 0, day, np.where(e > CIVIL_TWILIGHT_DEG, tail, 0.0))


def _sample_times(resolution: float) -> np.ndarray:
    """Sub-sample times (UTC minutes) for block averaging, shape (n_samples, n_sub)."""
    n = int(round(MINUTES_PER_DAY / resolution))
    n_sub = max(1, int(round(resolution)))
    offsets = (np.arange(n_sub) + 0.5) * (resolution / n_sub)
    return np.arange(n)[:, None] * resolution + offsets[None, :]


def _ou_process(rng: np.random.Generator, n: int, tau: float) -> np.ndarray:
    a = np.exp(-1.0 / tau)
    s = np.sqrt(1.0 - a * a)
    eps = rng.standard_normal(n)
    out = np.empty(n)
    out[0] = eps[0]
    for i in range(1, n):
        out[i] = a * out[i - 1] + s * eps[i]
    return out


def synth_light(coord: GeoCoord, date: dt.date, cfg: SynthConfig, site_id: str | None = None) -> DailyLightRecord:
    """Linear-scale synthetic light record for one UTC day."""
    times = _sample_times(cfg.light_resolution_min)
    lux = clear_sky_lux(solar_elevation(coord, date, times))
    if cfg.noise_kind != "none" and cfg.noise_level > 0:
        rng = record_rng(cfg.rng_seed, coord, date, stream=1)
        flat = lux.reshape(-1)
        minutes = times.reshape(-1)
        if cfg.noise_kind == "cloud-attenuation":
            # OU process on a 1-minute clock, mapped to attenuation in decades.
            ou = _ou_process(rng, MINUTES_PER_DAY + 1, tau=90.0)
            z = np.interp(minutes, np.arange(MINUTES_PER_DAY + 1), ou)
            decades = np.clip(cfg.noise_level * 0.5 * (1.0 + z), 0.0, None)
            flat = flat * 10.0 ** (-decades)
        elif cfg.noise_kind == "sensor-dropout":
            n_gaps = rng.poisson(3.0 * cfg.noise_level)
            flat = flat.copy()
            for _ in range(n_gaps):
                start = rng.uniform(0, MINUTES_PER_DAY)
                length = rng.exponential(20.0)
                hit = ((minutes - start) % MINUTES_PER_DAY) < length
                flat[hit] = 0.0
        lux = flat.reshape(times.shape)
    samples = lux.mean(axis=1)
    return DailyLightRecord(
        date=date,
        samples=samples,
        resolution=cfg.light_resolution_min,
        coord=coord,
        source="synthetic",
        site_id=site_id,
    )


def seasonal_baseline_c(lat, doy) -> np.ndarray:
    """Daily-mean temperature climatology; decreasing in latitude over the study band."""
    lat = np.asarray(lat, dtype=np.float64)
    cooling = 0.09 * (np.asarray(doy, dtype=np.float64) - 244.0) * (0.6 + 0.8 * (lat - 27.0) / 21.0)
    return 26.0 - 0.7 * (lat - 27.0) - cooling


DIURNAL_AMPLITUDE_C = 5.0
PEAK_LAG_MIN = 120.0


def weather_anomaly_c(coord: GeoCoord, date: dt.date, cfg: SynthConfig) -> float:
    """Spatially smooth daily anomaly: a few random plane waves with 10-30 degree wavelengths."""
    if cfg.weather_amplitude_c == 0:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.weather_seed), date.toordinal(), 7]))
    n_modes = 4
    angle = rng.uniform(0, 2 * np.pi, n_modes)
    wavelength = rng.uniform(10.0, 30.0, n_modes)
    phase = rng.uniform(0, 2 * np.pi, n_modes)
    k = 2 * np.pi / wavelength
    arg = k * (np.cos(angle) * coord.lat + np.sin(angle) * coord.lon) + phase
    return float(cfg.weather_amplitude_c * np.sqrt(2.0 / n_modes) * np.cos(arg).sum())


def synth_temp(coord: GeoCoord, date: dt.date, cfg: SynthConfig, site_id: str | None = None,
               source: str = "synthetic") -> DailyTempRecord:
    """Synthetic diurnal temperature for one UTC day, sampled at interval centers."""
    res = cfg.temp_resolution_min
    n = int(round(MINUTES_PER_DAY / res))
    t = (np.arange(n) + 0.5) * res
    doy = date.timetuple().tm_yday
    peak = solar_noon_utc(coord, date) + PEAK_LAG_MIN
    temp = (
        seasonal_baseline_c(coord.lat, doy)
        + DIURNAL_AMPLITUDE_C * np.cos(2 * np.pi * (t - peak) / MINUTES_PER_DAY)
        + weather_anomaly_c(coord, date, cfg)
    )
    if cfg.noise_kind != "none":
        rng = record_rng(cfg.rng_seed, coord, date, stream=2)
        temp = temp + rng.normal(0.0, cfg.temp_offset_c) + rng.normal(0.0, cfg.temp_noise_c, n)
    return DailyTempRecord(
        date=date,
        samples=np.clip(temp, -60.0, 60.0),
        resolution=res,
        coord=coord,
        source=source,
        site_id=site_id,
    )


def noise_free(cfg: SynthConfig) -> SynthConfig:
    """Same configuration with all per-record noise disabled."""
    return replace(cfg, noise_kind="none", noise_level=0.0)
