"""Likelihood maps from one day of sensor data, their fusion, and the
threshold baseline."""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field

import numpy as np

from .astro import clear_sky_lux, day_length_hours, equation_of_time, fractional_year, night_center_astro
from .daae import DaaeModel, denoise
from .geo import (COARSE_LAT, GeoCoord, LikelihoodMap, SearchGrid, argmax_map, fuse_maps, make_coarse_grid,
                  refine_map)
from .prep import CANONICAL_LIGHT_RES, CANONICAL_TEMP_RES, HALF_WINDOW_MIN, log_light, resample
from .records import MINUTES_PER_DAY, DailyLightRecord, DailyTempRecord
from .reflib import MINUTES_PER_DEGREE, ReferenceLibrary
from .siamese import SiameseModel, spatial_softmax

log = logging.getLogger(__name__)

CELL_RADIUS_DEG = 1.0
# Sunrise/sunset level of the baseline: the noiseless generator's irradiance
# with the sun 3 degrees below the horizon, and the matching day-length horizon.
BASELINE_HORIZON_DEG = -3.0
BASELINE_THRESHOLD_LOG = float(np.log10(clear_sky_lux(BASELINE_HORIZON_DEG)))


@dataclass(frozen=True)
class ScoredReference:
    coord: GeoCoord
    prob: float


@dataclass
class Models:
    light: SiameseModel | None = None
    temp: SiameseModel | None = None
    daae: DaaeModel | None = None


@dataclass
class Libraries:
    light: ReferenceLibrary | None = None
    temp: ReferenceLibrary | None = None


@dataclass
class LocalizationResult:
    date: dt.date
    estimate: GeoCoord
    fused_map: LikelihoodMap
    light_map: LikelihoodMap | None = None
    temp_map: LikelihoodMap | None = None
    baseline_estimate: GeoCoord | None = None
    degraded: bool = False
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def pt(c):
            return None if c is None else {"lat": round(c.lat, 6), "lon": round(c.lon, 6)}

        return {
            "date": self.date.isoformat(),
            "estimate": pt(self.estimate),
            "baseline_estimate": pt(self.baseline_estimate),
            "degraded": self.degraded,
            "modalities": [k for k, m in (("light", self.light_map), ("temperature", self.temp_map)) if m is not None],
            "diagnostics": self.diagnostics,
        }


# --------------------------------------------------------------------------- #
# cells


def _axis_hits(values, start, step, count, radius):
    """(ref, cell) index pairs with |value - cell| < radius along one axis."""
    reach = int(np.ceil(radius / step))
    base = np.rint((values - start) / step).astype(np.int64)
    refs, cells = [], []
    for o in range(-reach, reach + 1):
        i = base + o
        ok = (i >= 0) & (i < count)
        ok[ok] &= np.abs(values[ok] - (start + i[ok] * step)) < radius
        refs.append(np.flatnonzero(ok))
        cells.append(i[ok])
    return np.concatenate(refs), np.concatenate(cells)


def cell_average_arrays(lat, lon, probs, grid: SearchGrid, radius: float = CELL_RADIUS_DEG) -> LikelihoodMap:
    """Mean probability of the references within ``radius`` of each cell center on both axes
    (strict inequality). Cells without references are left at zero and unmasked."""
    lat, lon, probs = (np.asarray(v, dtype=np.float64) for v in (lat, lon, probs))
    r_lat, c_lat = _axis_hits(lat, grid.lat_start, grid.lat_step, grid.lat_count, radius)
    r_lon, c_lon = _axis_hits(lon, grid.lon_start, grid.lon_step, grid.lon_count, radius)
    # join the two axes on the reference index
    order_a = np.argsort(r_lat, kind="stable")
    order_b = np.argsort(r_lon, kind="stable")
    r_lat, c_lat = r_lat[order_a], c_lat[order_a]
    r_lon, c_lon = r_lon[order_b], c_lon[order_b]
    n = len(lat)
    cnt_a = np.bincount(r_lat, minlength=n)
    cnt_b = np.bincount(r_lon, minlength=n)
    start_a = np.concatenate([[0], np.cumsum(cnt_a)[:-1]])
    start_b = np.concatenate([[0], np.cumsum(cnt_b)[:-1]])
    flat_idx, weights = [], []
    for ia in range(int(cnt_a.max()) if n else 0):
        for ib in range(int(cnt_b.max()) if n else 0):
            ok = (cnt_a > ia) & (cnt_b > ib)
            refs = np.flatnonzero(ok)
            flat_idx.append(c_lat[start_a[refs] + ia] * grid.lon_count + c_lon[start_b[refs] + ib])
            weights.append(probs[refs])
    size = grid.lat_count * grid.lon_count
    if flat_idx:
        flat_idx = np.concatenate(flat_idx)
        weights = np.concatenate(weights)
    else:
        flat_idx = np.zeros(0, dtype=np.int64)
        weights = np.zeros(0)
    sums = np.bincount(flat_idx, weights=weights, minlength=size)
    counts = np.bincount(flat_idx, minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return LikelihoodMap(grid, mean.reshape(grid.shape), (counts > 0).reshape(grid.shape))


def cell_average(scored, grid: SearchGrid, radius: float = CELL_RADIUS_DEG) -> LikelihoodMap:
    if len(scored) == 0:
        raise ValueError("no scored references")
    lat = np.array([s.coord.lat for s in scored])
    lon = np.array([s.coord.lon for s in scored])
    probs = np.array([s.prob for s in scored])
    return cell_average_arrays(lat, lon, probs, grid, radius)


def fill_empty_cells(m: LikelihoodMap) -> LikelihoodMap:
    """Fill cells without a direct estimate.

    Each longitude column is interpolated along latitude between its nearest
    directly estimated cells (constant beyond the outermost ones). Columns
    with no direct estimate are filled by inverse-distance weighting of the
    four nearest directly estimated cells. The mask still marks the cells
    that were estimated directly.
    """
    direct = np.asarray(m.mask)
    if not direct.any():
        raise ValueError("every cell is empty")
    values = np.array(m.values, dtype=np.float64)
    rows = np.arange(m.grid.lat_count)
    done = direct.copy()
    for j in range(m.grid.lon_count):
        have = direct[:, j]
        if have.any() and not have.all():
            values[~have, j] = np.interp(rows[~have], rows[have], values[have, j])
            done[:, j] = True
    if not done.all():
        lats, lons = np.meshgrid(m.grid.lats, m.grid.lons, indexing="ij")
        src = np.flatnonzero(direct.ravel())
        src_pts = np.stack([lats.ravel()[src], lons.ravel()[src]], axis=1)
        src_val = values.ravel()[src]
        for flat in np.flatnonzero(~done.ravel()):
            d = np.hypot(src_pts[:, 0] - lats.ravel()[flat], src_pts[:, 1] - lons.ravel()[flat])
            near = np.argsort(d, kind="stable")[:4]
            w = 1.0 / d[near]
            values.ravel()[flat] = float((w * src_val[near]).sum() / w.sum())
    return LikelihoodMap(m.grid, values, direct)


# --------------------------------------------------------------------------- #
# scoring


def _windows(samples, idx, half):
    take = (np.asarray(idx)[:, None] + np.arange(-half, half + 1)[None, :]) % len(samples)
    return np.asarray(samples)[take]


def _center_idx(centers, res):
    pos = np.asarray(centers) / res - 0.5
    return np.floor(pos + 0.5).astype(np.int64)


class LightScorer:
    """Scores a light target against a light library with cached embeddings.

    The library's parent night centers and parent embeddings are computed once;
    a longitude-shifted entry reuses its parent's embedding because its window
    around its own (shifted) night center is the parent's window.
    """

    def __init__(self, model: SiameseModel, library: ReferenceLibrary):
        if model.modality != "light" or library.modality != "light":
            raise ValueError("LightScorer needs a light model and library")
        self.model = model
        self.library = library
        self.res = model.resolution
        self.half = int(round(HALF_WINDOW_MIN / self.res))
        self._centers = None
        self._emb = np.full((library.n_parents, model.embedding_dim), np.nan)

    def parent_centers(self) -> np.ndarray:
        if self._centers is None:
            self._centers = self.library.night_centers()
        return self._centers

    def parent_embeddings(self, parents) -> np.ndarray:
        parents = np.asarray(parents)
        todo = np.unique(parents[np.isnan(self._emb[parents, 0])])
        if len(todo):
            centers = self.parent_centers()[todo]
            idx = _center_idx(centers, self.res)
            wins = np.stack([_windows(self.library.records[p].samples, [i], self.half)[0] for p, i in zip(todo, idx)])
            self._emb[todo] = self.model.embed_array(wins)
        return self._emb[parents]

    def scores(self, target: DailyLightRecord, indices) -> np.ndarray:
        """Embedding distance of the target to each library entry in ``indices``."""
        a = self.library.arrays()
        indices = np.asarray(indices)
        parents = a["parent"][indices]
        centers = (self.parent_centers()[parents] + a["shift"][indices] * self.res) % MINUTES_PER_DAY
        idx = _center_idx(centers, self.res) % len(target.samples)
        uniq, inverse = np.unique(idx, return_inverse=True)
        tgt_emb = self.model.embed_array(_windows(target.samples, uniq, self.half))
        ref_emb = self.parent_embeddings(parents)
        return np.linalg.norm(ref_emb - tgt_emb[inverse.reshape(-1)], axis=1)


class TempScorer:
    """Scores a temperature target against same-date station/Kriged references,
    aligning both windows on the astronomical night center of the reference."""

    def __init__(self, model: SiameseModel, library: ReferenceLibrary):
        if model.modality != "temperature" or library.modality != "temperature":
            raise ValueError("TempScorer needs a temperature model and library")
        self.model = model
        self.library = library
        self.res = model.resolution
        self.half = int(round(HALF_WINDOW_MIN / self.res))
        self._cache: dict[tuple[int, int], tuple[int, np.ndarray]] = {}

    def _ref(self, i: int, date: dt.date):
        key = (int(i), date.toordinal())
        hit = self._cache.get(key)
        if hit is None:
            rec = self.library.records[i]
            center = night_center_astro(rec.coord, date)
            idx = int(_center_idx([center], self.res)[0]) % len(rec.samples)
            hit = self._cache[key] = (idx, None)
        return hit

    def scores(self, target: DailyTempRecord, indices) -> np.ndarray:
        indices = np.asarray(indices)
        refs = [self._ref(i, target.date) for i in indices]
        missing = [k for k, (i, (_, e)) in enumerate(zip(indices, refs)) if e is None]
        if missing:
            wins = np.stack([_windows(self.library.records[indices[k]].samples, [refs[k][0]], self.half)[0]
                             for k in missing])
            emb = self.model.embed_array(wins)
            for k, e in zip(missing, emb):
                key = (int(indices[k]), target.date.toordinal())
                self._cache[key] = (refs[k][0], e)
                refs[k] = self._cache[key]
        idx = np.array([r[0] for r in refs])
        ref_emb = np.stack([r[1] for r in refs])
        uniq, inverse = np.unique(idx, return_inverse=True)
        tgt_emb = self.model.embed_array(_windows(target.samples, uniq, self.half))
        return np.linalg.norm(ref_emb - tgt_emb[inverse.reshape(-1)], axis=1)


def score_references(model: SiameseModel, target, library: ReferenceLibrary, refs) -> list[ScoredReference]:
    """Spatial-softmax probabilities of ``target`` against library entries ``refs``."""
    refs = np.asarray(refs)
    if len(refs) == 0:
        raise ValueError("no references to score")
    scorer = LightScorer(model, library) if model.modality == "light" else TempScorer(model, library)
    phi = scorer.scores(target, refs)
    probs = spatial_softmax(phi, model.sigma)
    a = library.arrays()
    lon_key = "lon_eff" if model.modality == "light" else "lon"
    return [ScoredReference(GeoCoord(float(a["lat"][i]), float(a[lon_key][i])), float(p)) for i, p in zip(refs, probs)]


# --------------------------------------------------------------------------- #
# localization


def prepare_light_target(record: DailyLightRecord, daae: DaaeModel | None = None) -> DailyLightRecord:
    rec = record if record.log_scale else log_light(record)
    rec = resample(rec, CANONICAL_LIGHT_RES)
    if daae is not None and not rec.denoised:
        rec = denoise(daae, rec)
    return rec


class Localizer:
    """Holds models, libraries and embedding caches for repeated localizations."""

    def __init__(self, models: Models, libs: Libraries, grid: SearchGrid | None = None, refine_step: float = 0.1,
                 window_days: int = 5):
        self.models = models
        self.libs = libs
        self.grid = grid or make_coarse_grid()
        self.refine_step = refine_step
        self.window_days = window_days
        self._light = LightScorer(models.light, libs.light) if models.light and libs.light else None
        self._temp = TempScorer(models.temp, libs.temp) if models.temp and libs.temp else None

    def _finish(self, lat, lon, phi, sigma, diag):
        probs = spatial_softmax(phi, sigma)
        coarse = cell_average_arrays(lat, lon, probs, self.grid)
        diag["empty_cells"] = int((~coarse.mask).sum())
        filled = fill_empty_cells(coarse)
        return refine_map(filled, self.refine_step).normalized()

    def light_map(self, record: DailyLightRecord, date: dt.date | None = None, diag: dict | None = None):
        if self._light is None:
            raise ValueError("no light model/library configured")
        diag = {} if diag is None else diag
        date = date or record.date
        target = prepare_light_target(record, self.models.daae)
        refs = self.libs.light.query(date, self.window_days)
        if len(refs) == 0:
            raise ValueError(f"no light references within {self.window_days} days of {date}")
        phi = self._light.scores(target, refs)
        a = self.libs.light.arrays()
        diag.update(light_refs=int(len(refs)), light_sigma=self.models.light.sigma)
        return self._finish(a["lat"][refs], a["lon_eff"][refs], phi, self.models.light.sigma, diag)

    def temp_map(self, record: DailyTempRecord, date: dt.date | None = None, diag: dict | None = None):
        if self._temp is None:
            raise ValueError("no temperature model/library configured")
        diag = {} if diag is None else diag
        date = date or record.date
        target = resample(record, CANONICAL_TEMP_RES)
        refs = self.libs.temp.query(date, 0, same_year=True)
        if len(refs) == 0:
            raise ValueError(f"no temperature references on {date}")
        phi = self._temp.scores(target, refs)
        a = self.libs.temp.arrays()
        diag.update(temp_refs=int(len(refs)), temp_sigma=self.models.temp.sigma)
        sub = {}
        out = self._finish(a["lat"][refs], a["lon"][refs], phi, self.models.temp.sigma, sub)
        diag["temp_empty_cells"] = sub["empty_cells"]
        return out

    def fused(self, light: DailyLightRecord | None, temp: DailyTempRecord | None, date: dt.date | None = None,
              baseline: bool = True) -> LocalizationResult:
        date = date or (light.date if light is not None else temp.date)
        diag: dict = {}
        maps = {}
        failures = {}
        for name, rec, fn in (("light", light, self.light_map), ("temperature", temp, self.temp_map)):
            if rec is None:
                failures[name] = "no record"
                continue
            try:
                sub: dict = {}
                maps[name] = fn(rec, date, sub)
                if name == "light":
                    diag["light_refs"] = sub["light_refs"]
                    diag["light_sigma"] = sub["light_sigma"]
                    diag["light_empty_cells"] = sub["empty_cells"]
                else:
                    diag.update(sub)
            except (ValueError, ArithmeticError) as exc:
                failures[name] = str(exc)
        if not maps:
            raise ValueError(f"no modality could be localized: {failures}")
        if len(maps) == 2:
            fused = fuse_maps(maps["light"], maps["temperature"])
        else:
            fused = next(iter(maps.values()))
        if failures:
            diag["failed"] = failures
        base = None
        if baseline and light is not None:
            try:
                base = threshold_baseline(light, date)
            except ValueError as exc:
                diag["baseline_failed"] = str(exc)
        return LocalizationResult(date, argmax_map(fused), fused, maps.get("light"), maps.get("temperature"), base,
                                  degraded=len(maps) < 2, diagnostics=diag)


def localize_light(models: Models, libs: Libraries, light: DailyLightRecord, date: dt.date | None = None):
    return Localizer(models, libs).light_map(light, date)


def localize_temp(models: Models, libs: Libraries, temp: DailyTempRecord, date: dt.date | None = None):
    return Localizer(models, libs).temp_map(temp, date)


def localize_fused(models: Models, libs: Libraries, light, temp, date: dt.date | None = None):
    return Localizer(models, libs).fused(light, temp, date)


# --------------------------------------------------------------------------- #
# threshold baseline


@dataclass(frozen=True)
class ThresholdEvents:
    sunrise: float  # UTC minutes, may exceed a day when the night straddles midnight
    sunset: float

    @property
    def day_length_hours(self) -> float:
        return (self.sunset - self.sunrise) / 60.0

    @property
    def local_noon(self) -> float:
        return (0.5 * (self.sunrise + self.sunset)) % MINUTES_PER_DAY


def threshold_events(record: DailyLightRecord, threshold: float = BASELINE_THRESHOLD_LOG) -> ThresholdEvents:
    """Sunrise and sunset as threshold crossings bounding the longest bright run."""
    rec = record if record.log_scale else log_light(record)
    x = rec.samples
    n = len(x)
    res = rec.resolution
    above = x > threshold
    if above.all() or not above.any():
        raise ValueError("no threshold crossings")
    # rotate so the record starts in the dark, then find the longest bright run
    start = int(np.flatnonzero(~above)[0])
    rot = np.roll(above, -start)
    edges = np.flatnonzero(np.diff(np.concatenate([[0], rot.astype(np.int8), [0]])))
    runs = edges.reshape(-1, 2)
    r0, r1 = runs[np.argmax(runs[:, 1] - runs[:, 0])]
    xs = np.roll(x, -start)

    def crossing(i):
        # fractional position of the threshold between samples i and i + 1
        lo, hi = xs[i % n], xs[(i + 1) % n]
        return (i + (threshold - lo) / (hi - lo) + start + 0.5) * res

    sunrise = crossing(r0 - 1)
    sunset = crossing(r1 - 1)
    return ThresholdEvents(float(sunrise), float(sunset))


def baseline_longitude(noon_utc: float, date: dt.date) -> float:
    eot = float(equation_of_time(fractional_year(date, noon_utc)))
    lon = (720.0 - eot - noon_utc) / MINUTES_PER_DEGREE
    return float((lon + 180.0) % 360.0 - 180.0)


def baseline_latitude_scan(day_hours: float, date: dt.date, lon: float, lats=None):
    """Day-length mismatch (minutes) over a latitude scan."""
    lats = np.round(np.arange(COARSE_LAT[0], COARSE_LAT[1] + 1e-9, 0.1), 1) if lats is None else np.asarray(lats)
    pred = day_length_hours(lats, date, lon, horizon=BASELINE_HORIZON_DEG)
    return lats, np.abs(pred - day_hours) * 60.0


def flat_region_width(day_hours: float, date: dt.date, lon: float, tol_min: float) -> float:
    """Span of scanned latitudes whose predicted day length is within ``tol_min`` of the measurement."""
    lats, err = baseline_latitude_scan(day_hours, date, lon)
    ok = lats[err <= tol_min]
    return float(ok.max() - ok.min()) if len(ok) else 0.0


def threshold_baseline(record: DailyLightRecord, date: dt.date | None = None) -> GeoCoord:
    """Classic estimate: longitude from local noon at 4 min per degree, latitude by
    inverting day length over a 0.1 degree scan of the study band."""
    date = date or record.date
    ev = threshold_events(record)
    lon = baseline_longitude(ev.local_noon, date)
    lats, err = baseline_latitude_scan(ev.day_length_hours, date, lon)
    lat = float(lats[int(np.argmin(err))])
    return GeoCoord(lat, lon)
