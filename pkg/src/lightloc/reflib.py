"""Reference libraries of dated, located records.

A light library holds measured records plus longitude-synthesized copies.
Synthesized entries are stored lazily as (parent, integer sample shift,
remainder) and materialized on demand, so a library with a copy at every
degree of longitude stays as small as its measured part.

A temperature library holds station records and Kriged infill for grid
cells without a station.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import os
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .geo import COARSE_LAT, COARSE_LON, GeoCoord
from .prep import night_center_xcorr, roll_record
from .records import MINUTES_PER_DAY, DailyLightRecord, DailyTempRecord
from .store import save_npz, write_text

log = logging.getLogger(__name__)

PROVENANCES = ("measured", "synthesized-shift", "kriged")
MINUTES_PER_DEGREE = 4.0
YEAR_DAYS = 365
DEFAULT_SYNTH_LONS = tuple(float(x) for x in range(int(COARSE_LON[0]), int(COARSE_LON[1]) + 1))


class EmptyQuery(LookupError):
    pass


@dataclass(frozen=True)
class LibraryEntry:
    index: int
    record: object
    coord: GeoCoord
    date: dt.date
    provenance: str
    parent: int | None = None
    shift_samples: int = 0
    remainder_min: float = 0.0

    @property
    def effective_lon(self) -> float:
        """Longitude the shifted samples actually represent (target lon + remainder / 4)."""
        return self.coord.lon + self.remainder_min / MINUTES_PER_DEGREE


def longitude_shift(lon_source: float, lon_target: float, resolution: float) -> tuple[int, float]:
    """Samples to delay a record moved from ``lon_source`` to ``lon_target`` and the
    leftover minutes. Moving west delays every event by 4 min per degree."""
    minutes = MINUTES_PER_DEGREE * (lon_source - lon_target)
    k = int(np.floor(minutes / resolution + 0.5))
    return k, minutes - k * resolution


def _check_lon_target(lon):
    if not COARSE_LON[0] <= lon <= COARSE_LON[1]:
        raise ValueError(f"target longitude {lon} outside the grid extent {COARSE_LON}")


def synthesize_longitudes(entry: LibraryEntry, lon_targets) -> list[LibraryEntry]:
    """Materialized copies of a measured light entry at each target longitude."""
    if entry.provenance != "measured" or not isinstance(entry.record, DailyLightRecord):
        raise ValueError("longitude synthesis needs a measured light entry")
    out = []
    for lon in lon_targets:
        _check_lon_target(lon)
        k, rem = longitude_shift(entry.coord.lon, lon, entry.record.resolution)
        coord = GeoCoord(entry.coord.lat, float(lon))
        rec = roll_record(entry.record, k)
        rec = rec.with_samples(rec.samples, coord=coord, source="synthesized-shift")
        out.append(LibraryEntry(-1, rec, coord, entry.date, "synthesized-shift", entry.index, k, rem))
    return out


def day_of_year(date: dt.date) -> int:
    return date.timetuple().tm_yday


def doy_distance(a, b):
    """Circular day-of-year distance, ignoring leap-day offsets."""
    d = np.abs(np.asarray(a) - np.asarray(b)) % YEAR_DAYS
    return np.minimum(d, YEAR_DAYS - d)


class ReferenceLibrary:
    """Dated, located references for one modality.

    Entries ``0 .. n_parents-1`` are stored records (measured or kriged);
    the rest are lazily synthesized longitude shifts of measured light
    entries.
    """

    def __init__(self, modality: str):
        if modality not in ("light", "temperature"):
            raise ValueError("modality must be 'light' or 'temperature'")
        self.modality = modality
        self.records: list = []
        self.provenance: list[str] = []
        self._syn_parent: list[int] = []
        self._syn_shift: list[int] = []
        self._syn_rem: list[float] = []
        self._syn_lon: list[float] = []
        self._arrays = None
        self._centers: dict[int, float] = {}

    # -- building ---------------------------------------------------------

    def add(self, record, provenance: str = "measured") -> int:
        want = DailyLightRecord if self.modality == "light" else DailyTempRecord
        if not isinstance(record, want):
            raise TypeError(f"{self.modality} library takes {want.__name__}")
        if record.coord is None:
            raise ValueError("library entries need a coordinate")
        if provenance not in ("measured", "kriged"):
            raise ValueError(f"stored entries are measured or kriged, not {provenance!r}")
        if self._syn_parent:
            raise RuntimeError("add stored records before synthesizing longitudes")
        self.records.append(record)
        self.provenance.append(provenance)
        self._arrays = None
        return len(self.records) - 1

    def synthesize(self, parent: int, lon_targets=DEFAULT_SYNTH_LONS) -> list[int]:
        """Register shifted copies of stored entry ``parent``; returns their indices."""
        if self.modality != "light":
            raise ValueError("longitude synthesis applies to light only")
        if self.provenance[parent] != "measured":
            raise ValueError("only measured entries can be shifted")
        rec = self.records[parent]
        added = []
        for lon in lon_targets:
            _check_lon_target(lon)
            k, rem = longitude_shift(rec.coord.lon, lon, rec.resolution)
            self._syn_parent.append(parent)
            self._syn_shift.append(k)
            self._syn_rem.append(rem)
            self._syn_lon.append(float(lon))
            added.append(len(self.records) + len(self._syn_parent) - 1)
        self._arrays = None
        return added

    def synthesize_all(self, lon_targets=DEFAULT_SYNTH_LONS) -> int:
        n = 0
        for i, prov in enumerate(self.provenance):
            if prov == "measured":
                n += len(self.synthesize(i, lon_targets))
        return n

    # -- access -----------------------------------------------------------

    @property
    def n_parents(self) -> int:
        return len(self.records)

    def __len__(self) -> int:
        return len(self.records) + len(self._syn_parent)

    def arrays(self) -> dict:
        """Column view of every entry (cached until the library changes)."""
        if self._arrays is None:
            n_p = len(self.records)
            lat = np.array([r.coord.lat for r in self.records])
            lon = np.array([r.coord.lon for r in self.records])
            ordinal = np.array([r.date.toordinal() for r in self.records], dtype=np.int64)
            doy = np.array([day_of_year(r.date) for r in self.records], dtype=np.int64)
            year = np.array([r.date.year for r in self.records], dtype=np.int64)
            prov = np.array([PROVENANCES.index(p) for p in self.provenance], dtype=np.int8)
            sp = np.array(self._syn_parent, dtype=np.int64)
            parent = np.concatenate([np.arange(n_p), sp])
            shift = np.concatenate([np.zeros(n_p, dtype=np.int64), np.array(self._syn_shift, dtype=np.int64)])
            rem = np.concatenate([np.zeros(n_p), np.array(self._syn_rem)])
            syn_lon = np.array(self._syn_lon)
            self._arrays = {
                "parent": parent,
                "shift": shift,
                "remainder": rem,
                "lat": np.concatenate([lat, lat[sp]]) if n_p else lat,
                "lon": np.concatenate([lon, syn_lon]),
                "lon_eff": np.concatenate([lon, syn_lon + np.array(self._syn_rem) / MINUTES_PER_DEGREE]),
                "ordinal": np.concatenate([ordinal, ordinal[sp]]) if n_p else ordinal,
                "doy": np.concatenate([doy, doy[sp]]) if n_p else doy,
                "year": np.concatenate([year, year[sp]]) if n_p else year,
                "provenance": np.concatenate([prov, np.full(len(sp), 1, dtype=np.int8)]),
            }
            for v in self._arrays.values():
                v.setflags(write=False)
        return self._arrays

    def entry(self, i: int) -> LibraryEntry:
        n_p = len(self.records)
        if i < 0 or i >= len(self):
            raise IndexError(i)
        if i < n_p:
            rec = self.records[i]
            return LibraryEntry(i, rec, rec.coord, rec.date, self.provenance[i])
        j = i - n_p
        parent = self._syn_parent[j]
        src = self.records[parent]
        coord = GeoCoord(src.coord.lat, self._syn_lon[j])
        k = self._syn_shift[j]
        rec = roll_record(src, k)
        rec = rec.with_samples(rec.samples, coord=coord, source="synthesized-shift")
        return LibraryEntry(i, rec, coord, src.date, "synthesized-shift", parent, k, self._syn_rem[j])

    def night_center(self, parent: int) -> float:
        """Cached xcorr night center of a stored light record (log scale)."""
        c = self._centers.get(parent)
        if c is None:
            c = self._centers[parent] = night_center_xcorr(self.records[parent])
        return c

    def night_centers(self) -> np.ndarray:
        return np.array([self.night_center(i) for i in range(self.n_parents)])

    def entry_night_centers(self, indices) -> np.ndarray:
        """Night center of each entry: the parent's center moved by the entry's shift."""
        a = self.arrays()
        idx = np.asarray(indices)
        res = self.records[0].resolution if self.records else 3.0
        base = np.array([self.night_center(int(p)) for p in a["parent"][idx]])
        return (base + a["shift"][idx] * res) % MINUTES_PER_DAY

    def provenance_histogram(self) -> dict:
        counts = np.bincount(self.arrays()["provenance"], minlength=len(PROVENANCES))
        return {p: int(c) for p, c in zip(PROVENANCES, counts)}

    # -- queries ----------------------------------------------------------

    def query(self, date: dt.date, window_days: int = 5, same_year: bool = False) -> np.ndarray:
        """Indices of entries within ``window_days`` of ``date`` by day of year.

        With ``same_year`` the match is on the calendar date instead.
        """
        a = self.arrays()
        if same_year:
            mask = np.abs(a["ordinal"] - date.toordinal()) <= window_days
        else:
            mask = doy_distance(a["doy"], day_of_year(date)) <= window_days
        return np.flatnonzero(mask)

    # -- persistence ------------------------------------------------------

    def save(self, path) -> dict:
        """Write ``<path>`` (npz pack) and ``<path>.manifest.json``; returns the manifest."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        a = self.arrays()
        recs = self.records
        pack = {
            "modality": np.array(self.modality),
            "samples": np.array([r.samples for r in recs]) if recs else np.zeros((0, 0)),
            "resolution": np.array([r.resolution for r in recs]),
            "ordinal": a["ordinal"][:len(recs)],
            "lat": a["lat"][:len(recs)],
            "lon": a["lon"][:len(recs)],
            "provenance": np.array(self.provenance, dtype="U20"),
            "source": np.array([r.source for r in recs], dtype="U20"),
            "site_id": np.array([r.site_id or "" for r in recs], dtype="U64"),
            "log_scale": np.array([getattr(r, "log_scale", False) for r in recs]),
            "denoised": np.array([getattr(r, "denoised", False) for r in recs]),
            "syn_parent": np.array(self._syn_parent, dtype=np.int64),
            "syn_shift": np.array(self._syn_shift, dtype=np.int64),
            "syn_rem": np.array(self._syn_rem),
            "syn_lon": np.array(self._syn_lon),
        }
        save_npz(path, pack)
        manifest = self.manifest()
        write_text(str(path) + ".manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest

    def manifest(self) -> dict:
        a = self.arrays()
        out = {
            "modality": self.modality,
            "entries": len(self),
            "stored": self.n_parents,
            "synthesized": len(self._syn_parent),
            "provenance": self.provenance_histogram(),
        }
        if len(self):
            out["extent"] = {
                "lat": [float(a["lat"].min()), float(a["lat"].max())],
                "lon": [float(a["lon"].min()), float(a["lon"].max())],
                "dates": [dt.date.fromordinal(int(a["ordinal"].min())).isoformat(),
                          dt.date.fromordinal(int(a["ordinal"].max())).isoformat()],
            }
        return out

    @classmethod
    def load(cls, path) -> "ReferenceLibrary":
        with np.load(path, allow_pickle=False) as f:
            z = {k: f[k] for k in f.files}
        lib = cls(str(z["modality"]))
        for i in range(len(z["ordinal"])):
            coord = GeoCoord(float(z["lat"][i]), float(z["lon"][i]))
            date = dt.date.fromordinal(int(z["ordinal"][i]))
            site = str(z["site_id"][i]) or None
            if lib.modality == "light":
                rec = DailyLightRecord(date, z["samples"][i], float(z["resolution"][i]), coord,
                                       str(z["source"][i]), bool(z["log_scale"][i]), bool(z["denoised"][i]), site)
            else:
                rec = DailyTempRecord(date, z["samples"][i], float(z["resolution"][i]), coord,
                                      str(z["source"][i]), site)
            lib.records.append(rec)
            lib.provenance.append(str(z["provenance"][i]))
        lib._syn_parent = [int(v) for v in z["syn_parent"]]
        lib._syn_shift = [int(v) for v in z["syn_shift"]]
        lib._syn_rem = [float(v) for v in z["syn_rem"]]
        lib._syn_lon = [float(v) for v in z["syn_lon"]]
        return lib


def query_light_refs(lib: ReferenceLibrary, date: dt.date, window_days: int = 5) -> np.ndarray:
    """Entry indices within +/- ``window_days`` days of ``date`` in any year (inclusive)."""
    if lib.modality != "light":
        raise ValueError("query_light_refs needs a light library")
    return lib.query(date, window_days)


# --------------------------------------------------------------------------- #
# weather stations


class NotAvailable(LookupError):
    pass


@dataclass(frozen=True)
class StationQuery:
    coord: GeoCoord
    date: dt.date
    resolution: float = 60.0

    def __post_init__(self):
        lat, lon = self.coord.as_tuple()
        if not (COARSE_LAT[0] - 1 <= lat <= COARSE_LAT[1] + 1 and COARSE_LON[0] - 1 <= lon <= COARSE_LON[1] + 1):
            raise ValueError(f"station query {self.coord} outside the study extent")
        if self.resolution != 60.0:
            raise ValueError("stations report hourly")


def _fmt_coord(v: float) -> str:
    return f"{v:.2f}"


def station_filename(coord: GeoCoord) -> str:
    return f"station_{_fmt_coord(coord.lat)}_{_fmt_coord(coord.lon)}.csv"


def write_station_fixture(directory, coord: GeoCoord, days: dict) -> Path:
    """Write ``{date: 24 hourly values}`` as a fixture CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / station_filename(coord)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "hour", "temp_c"])
        for date in sorted(days):
            for hour, value in enumerate(days[date]):
                w.writerow([date.isoformat(), hour, f"{value:.4f}"])
    return path


class FixtureStationClient:
    """Offline client over a directory of ``station_<lat>_<lon>.csv`` files."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.calls = 0
        self._parsed: dict[Path, dict] = {}

    def stations(self) -> list[GeoCoord]:
        out = []
        for p in sorted(self.directory.glob("station_*_*.csv")):
            lat, lon = p.stem.split("_")[1:3]
            out.append(GeoCoord(float(lat), float(lon)))
        return out

    def _table(self, path: Path) -> dict:
        if path not in self._parsed:
            table: dict[str, dict[int, float]] = {}
            with open(path, newline="") as fh:
                for row in csv.reader(fh):
                    if not row or row[0] == "date":
                        continue
                    table.setdefault(row[0], {})[int(row[1])] = float(row[2])
            self._parsed[path] = table
        return self._parsed[path]

    def fetch(self, q: StationQuery) -> np.ndarray:
        self.calls += 1
        path = self.directory / station_filename(q.coord)
        if not path.exists():
            raise NotAvailable(f"no fixture for {q.coord}")
        hours = self._table(path).get(q.date.isoformat())
        if hours is None or sorted(hours) != list(range(24)):
            raise NotAvailable(f"no complete day {q.date} at {q.coord}")
        return np.array([hours[h] for h in range(24)])


class LiveStationClient:
    """HTTP client for an hourly-history weather API.

    The endpoint and key come from ``LIGHTLOC_STATION_URL`` and
    ``LIGHTLOC_STATION_KEY``. A request asks for one UTC day at a lat/lon
    and expects JSON ``{"data": [{"timestamp_utc": ..., "temp": ...}, ...]}``.
    """

    def __init__(self, endpoint=None, key=None, stations=(), retries=3, backoff_s=1.0, timeout_s=20.0,
                 opener=None, sleep=time.sleep):
        self.endpoint = endpoint or os.environ.get("LIGHTLOC_STATION_URL")
        self.key = key or os.environ.get("LIGHTLOC_STATION_KEY")
        self._stations = list(stations)
        self.retries, self.backoff_s, self.timeout_s = retries, backoff_s, timeout_s
        self._open = opener or urllib.request.urlopen
        self._sleep = sleep
        self.calls = 0

    def stations(self) -> list[GeoCoord]:
        return list(self._stations)

    def _url(self, q: StationQuery) -> str:
        params = {
            "lat": _fmt_coord(q.coord.lat),
            "lon": _fmt_coord(q.coord.lon),
            "start_date": q.date.isoformat(),
            "end_date": (q.date + dt.timedelta(days=1)).isoformat(),
            "tz": "utc",
        }
        if self.key:
            params["key"] = self.key
        return f"{self.endpoint}?{urllib.parse.urlencode(params)}"

    def fetch(self, q: StationQuery) -> np.ndarray:
        if not self.endpoint:
            raise NotAvailable("no station endpoint configured")
        self.calls += 1
        last = None
        for attempt in range(self.retries):
            try:
                with self._open(self._url(q), timeout=self.timeout_s) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return _parse_hourly(payload, q.date)
            except (urllib.error.URLError, OSError, ValueError) as exc:
                last = exc
                if attempt + 1 < self.retries:
                    self._sleep(self.backoff_s * 2 ** attempt)
        raise NotAvailable(f"station request failed after {self.retries} attempts: {last}")


def _parse_hourly(payload: dict, date: dt.date) -> np.ndarray:
    hours = {}
    for row in payload.get("data", []):
        ts = dt.datetime.fromisoformat(str(row["timestamp_utc"]).replace("Z", ""))
        if ts.date() == date:
            hours[ts.hour] = float(row["temp"])
    if sorted(hours) != list(range(24)):
        raise ValueError(f"incomplete hourly data for {date}")
    return np.array([hours[h] for h in range(24)])


class SyntheticStationClient:
    """Stations backed by the synthetic generator; ``missing`` lists (coord, date)
    pairs or coords that report nothing."""

    def __init__(self, stations, cfg, missing=()):
        self._stations = list(stations)
        self.cfg = cfg
        self.missing = set(missing)
        self.calls = 0

    def stations(self) -> list[GeoCoord]:
        return list(self._stations)

    def fetch(self, q: StationQuery) -> np.ndarray:
        from .astro import synth_temp

        self.calls += 1
        if q.coord in self.missing or (q.coord, q.date) in self.missing:
            raise NotAvailable(f"station {q.coord} silent on {q.date}")
        return synth_temp(q.coord, q.date, self.cfg, source="station").samples.copy()


class StationCache:
    """On-disk cache keyed by (coord rounded to 0.01 degree, date)."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def _path(self, q: StationQuery) -> Path:
        return self.directory / f"{_fmt_coord(q.coord.lat)}_{_fmt_coord(q.coord.lon)}_{q.date.isoformat()}.json"

    def get(self, q: StationQuery):
        p = self._path(q)
        if p.exists():
            return np.array(json.loads(p.read_text()))
        return None

    def put(self, q: StationQuery, values: np.ndarray):
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = self._path(q).with_suffix(".tmp")
        tmp.write_text(json.dumps([float(v) for v in values]))
        tmp.replace(self._path(q))


def station_temperature(client, q: StationQuery, cache: StationCache | None = None) -> DailyTempRecord:
    """Hourly station day at ``q``; served from ``cache`` when present."""
    values = cache.get(q) if cache is not None else None
    if values is None:
        values = client.fetch(q)
        if cache is not None:
            cache.put(q, values)
    return DailyTempRecord(q.date, values, 60.0, q.coord, "station")


# --------------------------------------------------------------------------- #
# Kriging


class KrigingError(np.linalg.LinAlgError):
    pass


EARTH_RADIUS_KM = 6371.0


def haversine_km(lat1, lon1, lat2, lon2):
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dlat = p2 - p1
    dlon = np.deg2rad(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dlat / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass(frozen=True)
class Variogram:
    """Exponential model gamma(h) = sill * (1 - exp(-h / range_km)) + nugget for h > 0."""

    sill: float
    range_km: float
    nugget: float = 0.0

    def __call__(self, h):
        h = np.asarray(h, dtype=np.float64)
        g = self.sill * (1.0 - np.exp(-h / self.range_km)) + self.nugget
        return np.where(h > 0, g, 0.0)


def _pairwise_km(lat, lon):
    return haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])


def fit_variogram(lat, lon, values, nugget: float = 0.0, n_bins: int = 8) -> Variogram:
    """Least-squares fit of the exponential model to the binned empirical variogram.

    Degenerate inputs (fewer than three points, or a flat field) fall back to a
    unit sill with the median station spacing as the range; with zero nugget
    the Kriging weights do not depend on the sill.
    """
    lat, lon, values = (np.asarray(v, dtype=np.float64) for v in (lat, lon, values))
    n = len(values)
    d = _pairwise_km(lat, lon)
    iu = np.triu_indices(n, 1)
    h = d[iu]
    fallback = Variogram(1.0, float(np.median(h)) if len(h) and np.median(h) > 0 else 100.0, nugget)
    if n < 3 or np.ptp(values) == 0:
        return fallback
    semi = 0.5 * (values[:, None] - values[None, :])[iu] ** 2
    edges = np.quantile(h, np.linspace(0, 1, min(n_bins, len(h)) + 1))
    which = np.clip(np.searchsorted(edges, h, side="right") - 1, 0, len(edges) - 2)
    hb, gb = [], []
    for b in range(len(edges) - 1):
        sel = which == b
        if sel.any():
            hb.append(h[sel].mean())
            gb.append(semi[sel].mean())
    hb, gb = np.array(hb), np.array(gb)
    if len(hb) < 2 or gb.max() <= 0:
        return fallback

    def resid(p):
        return Variogram(np.exp(p[0]), np.exp(p[1]), nugget)(hb) - gb

    x0 = np.log([max(gb.max(), 1e-6), max(np.median(hb), 1.0)])
    fit = least_squares(resid, x0, bounds=([np.log(1e-8), np.log(1.0)], [np.log(1e6), np.log(2e4)]))
    return Variogram(float(np.exp(fit.x[0])), float(np.exp(fit.x[1])), nugget)


def _dedupe(lat, lon, values):
    keys = np.round(np.stack([lat, lon], axis=1), 9)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    vals = np.atleast_2d(values.T).T if values.ndim == 1 else values
    merged = np.zeros((len(uniq),) + vals.shape[1:])
    np.add.at(merged, inverse, vals)
    merged /= np.bincount(inverse)[(slice(None),) + (None,) * (vals.ndim - 1)]
    return uniq[:, 0], uniq[:, 1], merged.reshape((len(uniq),) + values.shape[1:])


def kriging_weights(lat, lon, target: GeoCoord, variogram: Variogram) -> np.ndarray:
    """Ordinary Kriging weights (sum to one) for predicting at ``target``."""
    lat, lon = np.asarray(lat, dtype=np.float64), np.asarray(lon, dtype=np.float64)
    n = len(lat)
    if n == 1:
        return np.ones(1)
    a = np.ones((n + 1, n + 1))
    a[:n, :n] = variogram(_pairwise_km(lat, lon))
    a[n, n] = 0.0
    b = np.ones(n + 1)
    b[:n] = variogram(haversine_km(lat, lon, target.lat, target.lon))
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise KrigingError(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise KrigingError("non-finite Kriging weights")
    return sol[:n]


def kriging_interpolate(samples, target: GeoCoord, variogram: Variogram | None = None, nugget: float = 0.0):
    """Ordinary Kriging estimate at ``target`` from ``[(GeoCoord, value)]``.

    ``value`` may be a scalar or a vector (e.g. 24 hourly readings); vectors
    share one set of weights, with the variogram fitted to their means.
    Coincident samples are averaged before solving.
    """
    if len(samples) == 0:
        raise ValueError("Kriging needs at least one sample")
    lat = np.array([c.lat for c, _ in samples])
    lon = np.array([c.lon for c, _ in samples])
    values = np.array([np.asarray(v, dtype=np.float64) for _, v in samples])
    try:
        return _krige(lat, lon, values, target, variogram, nugget)
    except KrigingError:
        lat, lon, values = _dedupe(lat, lon, values)
        return _krige(lat, lon, values, target, variogram, nugget)


def _krige(lat, lon, values, target, variogram, nugget):
    summary = values if values.ndim == 1 else values.mean(axis=1)
    vg = variogram or fit_variogram(lat, lon, summary, nugget=nugget)
    w = kriging_weights(lat, lon, target, vg)
    out = np.tensordot(w, values, axes=1)
    return float(out) if np.ndim(out) == 0 else out


def build_temp_reference(cells, dates, client, stations=None, k: int = 8, max_km: float = 500.0,
                         cache: StationCache | None = None, cell_half_width: float = 0.5):
    """Temperature library over grid ``cells`` for each of ``dates``.

    A cell uses the nearest station inside it (within ``cell_half_width``
    degrees on both axes) when that station reports; otherwise the day is
    Kriged from the ``k`` nearest reporting stations within ``max_km``.
    Cells with no such station are skipped and returned in ``unavailable``.
    """
    stations = list(stations if stations is not None else client.stations())
    s_lat = np.array([s.lat for s in stations])
    s_lon = np.array([s.lon for s in stations])
    lib = ReferenceLibrary("temperature")
    unavailable = []
    for date in dates:
        day: dict[int, np.ndarray] = {}

        def reading(i):
            if i not in day:
                try:
                    day[i] = station_temperature(client, StationQuery(stations[i], date), cache).samples
                except NotAvailable:
                    day[i] = None
            return day[i]

        for cell in cells:
            inside = np.flatnonzero((np.abs(s_lat - cell.lat) < cell_half_width)
                                    & (np.abs(s_lon - cell.lon) < cell_half_width))
            inside = inside[np.argsort(haversine_km(s_lat[inside], s_lon[inside], cell.lat, cell.lon), kind="stable")]
            hit = next((i for i in inside if reading(i) is not None), None)
            if hit is not None:
                lib.add(DailyTempRecord(date, day[hit], 60.0, stations[hit], "station",
                                        site_id=station_filename(stations[hit])[:-4]))
                continue
            dist = haversine_km(s_lat, s_lon, cell.lat, cell.lon)
            near = [i for i in np.argsort(dist, kind="stable") if dist[i] <= max_km and reading(i) is not None][:k]
            if not near:
                unavailable.append((cell, date))
                continue
            values = kriging_interpolate([(stations[i], day[i]) for i in near], cell)
            lib.add(DailyTempRecord(date, np.clip(values, -60, 60), 60.0, cell, "kriged"), provenance="kriged")
    return lib, unavailable
