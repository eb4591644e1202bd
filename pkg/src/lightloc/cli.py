"""Command-line pipeline: synth, ingest, build-reflib, train, localize, evaluate, bias-report.

Every verb reads one JSON pipeline configuration (``--config``; built-in
defaults otherwise). Relative paths in it resolve against ``--out`` or, when
that is absent, the configuration file's directory. Exit codes: 0 success,
2 input error, 3 missing artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as dt
import fcntl
import io
import json
import logging
import multiprocessing
import sys
from collections import defaultdict
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .astro import PolarDayError, SynthConfig, clear_sky_lux, noise_free, solar_elevation, synth_light, synth_temp
from .biaseval import (ErrorSample, bias_csv, bias_report, biweekly_csv, biweekly_mae, error_cdf, format_bias_table,
                       format_overall, isolation_score, overall_mae)
from .daae import DaaeModel, DaaeTrainConfig, TrainingDiverged as DaaeDiverged, make_optimizers, pseudo_clean, train_daae
from .geo import COARSE_LAT, COARSE_LON, GeoCoord, LikelihoodMap, SearchGrid, in_coarse_extent, make_coarse_grid
from .localizer import Libraries, LocalizationResult, Localizer, Models
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .prep import CANONICAL_LIGHT_RES, CANONICAL_TEMP_RES, log_light, resample
from .records import MINUTES_PER_DAY, DailyLightRecord, DailyTempRecord
from .reflib import (FixtureStationClient, LiveStationClient, ReferenceLibrary, StationCache, SyntheticStationClient,
                     build_temp_reference)
from .siamese import (PairPolicy, SiameseModel, SiameseTrainConfig, TrainingDiverged as SiameseDiverged,
                      make_optimizer, make_pairs, train_siamese)
from .store import save_npz, write_text

log = logging.getLogger("lightloc")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
SCHEMA_VERSION = 1
MAX_MISSING_FRACTION = 0.2
RAW_HEADER = ["site_id", "lat", "lon", "date", "utc_seconds", "value"]
MODALITY_DIRS = {"light": "light", "temperature": "temp"}


class CliError(Exception):
    code = EXIT_INPUT


class InputError(CliError):
    code = EXIT_INPUT


class MissingArtifact(CliError):
    code = EXIT_MISSING


class NumericalFailure(CliError):
    code = EXIT_NUMERIC


# --------------------------------------------------------------------------- #
# configuration

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "paths": {"corpus": "corpus", "libraries": "libraries", "models": "models", "outputs": "outputs"},
    "synth": {
        "n_sites": 300,
        "years": [2018, 2019, 2020],
        "season_start": "09-01",
        "season_end": "12-15",
        "noise_kind": "cloud-attenuation",
        "noise_level": 0.5,
        "weather_amplitude_c": 2.0,
        "extent": {"lat": [27.5, 47.5], "lon": [-121.5, -66.5]},
    },
    "split": {"train_years": [2018, 2019], "test_years": [2020]},
    "stations": {"source": "synthetic", "spacing_deg": 1.0, "fixture_dir": None, "cache_dir": None},
    "reflib": {"denoise": False, "synth_lons": None},
    "training": {
        "daae": {"epochs": 20, "batch": 32, "lr": 1e-3, "step_size": 1000, "gamma": 0.1, "adv_weight": 1.0,
                 "max_days": 4000},
        "light": {"epochs": 3, "batch": 16, "lr": 1e-3, "step_size": 1000, "gamma": 0.1, "m": 1.0,
                  "n_pairs": 6000, "hard_fraction": 0.5},
        "temp": {"epochs": 3, "batch": 16, "lr": 1e-3, "step_size": 1000, "gamma": 0.1, "m": 1.0,
                 "n_pairs": 4000, "hard_fraction": 0.5},
    },
    "grid": {"refine_step": 0.1, "window_days": 5},
    "k": {"isolation": 5, "mi": 3, "kriging": 8},
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise InputError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


class PipelineConfig:
    """Validated configuration plus the directory its relative paths resolve against."""

    def __init__(self, data: dict, root: Path):
        self.data = data
        self.root = Path(root)
        self._validate()

    @classmethod
    def load(cls, path=None, out=None, seed=None) -> "PipelineConfig":
        user = {}
        root = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise InputError(f"config file {path} not found")
            try:
                user = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise InputError(f"config {path}: {exc}") from exc
            if not isinstance(user, dict):
                raise InputError("config must be a JSON object")
            if user.get("schema_version") != SCHEMA_VERSION:
                raise InputError(f"config schema_version must be {SCHEMA_VERSION}, got {user.get('schema_version')!r}")
            if "seed" not in user:
                raise InputError("config must set 'seed'")
            root = path.resolve().parent
        data = _merge(DEFAULT_CONFIG, user)
        if seed is not None:
            data["seed"] = int(seed)
        if out is not None:
            root = Path(out).resolve()
        return cls(data, root)

    def _validate(self):
        d = self.data
        if not isinstance(d["seed"], int):
            raise InputError("seed must be an integer")
        s = d["synth"]
        (la0, la1), (lo0, lo1) = s["extent"]["lat"], s["extent"]["lon"]
        if not (COARSE_LAT[0] <= la0 < la1 <= COARSE_LAT[1] and COARSE_LON[0] <= lo0 < lo1 <= COARSE_LON[1]):
            raise InputError(f"synth extent {s['extent']} outside the study extent lat {COARSE_LAT}, lon {COARSE_LON}")
        if s["n_sites"] < 1:
            raise InputError("synth.n_sites must be >= 1")
        try:
            self.season_dates(s["years"][0])
            self.synth_config()
        except ValueError as exc:
            raise InputError(f"synth settings: {exc}") from exc
        for stage in ("daae", "light", "temp"):
            t = d["training"][stage]
            if t["epochs"] < 0 or t["batch"] < 1 or t["lr"] <= 0:
                raise InputError(f"training.{stage}: epochs >= 0, batch >= 1 and lr > 0 required")

    def path(self, key: str) -> Path:
        p = Path(self.data["paths"][key])
        return p if p.is_absolute() else self.root / p

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def synth_config(self) -> SynthConfig:
        s = self.data["synth"]
        return SynthConfig(noise_kind=s["noise_kind"], noise_level=float(s["noise_level"]), rng_seed=self.seed,
                           weather_seed=self.seed, weather_amplitude_c=float(s["weather_amplitude_c"]))

    def season_dates(self, year: int) -> list[dt.date]:
        s = self.data["synth"]
        start = dt.date.fromisoformat(f"{year}-{s['season_start']}")
        end = dt.date.fromisoformat(f"{year}-{s['season_end']}")
        if end < start:
            raise ValueError("season_end before season_start")
        return [start + dt.timedelta(days=i) for i in range((end - start).days + 1)]

    def grid(self) -> SearchGrid:
        return make_coarse_grid()


# --------------------------------------------------------------------------- #
# small helpers


@contextmanager
def locked(directory: Path):
    """Exclusive advisory lock on ``directory`` for the duration of a command."""
    directory.mkdir(parents=True, exist_ok=True)
    fh = open(directory / ".lightloc.lock", "w")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except OSError as exc:
        fh.close()
        raise InputError(f"{directory} is in use by another lightloc process") from exc
    try:
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def _fmt(v: float) -> str:
    # shortest text that round-trips exactly
    return repr(float(v))


def _parse_date_range(text: str) -> tuple[dt.date, dt.date]:
    try:
        if ":" in text:
            a, b = text.split(":", 1)
            return dt.date.fromisoformat(a), dt.date.fromisoformat(b)
        d = dt.date.fromisoformat(text)
        return d, d
    except ValueError as exc:
        raise InputError(f"bad date or range {text!r} (use YYYY-MM-DD or YYYY-MM-DD:YYYY-MM-DD)") from exc


# --------------------------------------------------------------------------- #
# corpus on disk


def synth_sites(cfg: PipelineConfig) -> list[tuple[str, GeoCoord]]:
    s = cfg.data["synth"]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    lat = rng.uniform(*s["extent"]["lat"], size=s["n_sites"])
    lon = rng.uniform(*s["extent"]["lon"], size=s["n_sites"])
    return [(f"s{i:04d}", GeoCoord(round(float(a), 4), round(float(b), 4))) for i, (a, b) in enumerate(zip(lat, lon))]


def _raw_lines(site_id: str, coord: GeoCoord, date: dt.date, samples: np.ndarray, resolution: float) -> list[str]:
    head = f"{site_id},{_fmt(coord.lat)},{_fmt(coord.lon)},{date.isoformat()},"
    step = int(round(resolution * 60))
    return [f"{head}{i * step},{_fmt(v)}" for i, v in enumerate(samples)]


def write_raw_csv(path: Path, lines: list[str]) -> None:
    write_text(path, ",".join(RAW_HEADER) + "\n" + "\n".join(lines) + ("\n" if lines else ""))


class Corpus:
    """Normalized per-day records of one modality, kept as parallel arrays."""

    def __init__(self, modality: str, site_id, lat, lon, ordinal, samples, resolution: float, flags=None):
        self.modality = modality
        self.site_id = np.asarray(site_id, dtype="U64")
        self.lat = np.asarray(lat, dtype=np.float64)
        self.lon = np.asarray(lon, dtype=np.float64)
        self.ordinal = np.asarray(ordinal, dtype=np.int64)
        self.samples = np.asarray(samples, dtype=np.float64)
        self.resolution = float(resolution)
        self.flags = np.asarray(flags if flags is not None else [""] * len(self.site_id), dtype="U64")

    def __len__(self):
        return len(self.site_id)

    def record(self, i: int):
        coord = GeoCoord(float(self.lat[i]), float(self.lon[i]))
        date = dt.date.fromordinal(int(self.ordinal[i]))
        sid = str(self.site_id[i])
        if self.modality == "light":
            return DailyLightRecord(date, self.samples[i], self.resolution, coord, "sensor", site_id=sid)
        return DailyTempRecord(date, self.samples[i], self.resolution, coord, "sensor", site_id=sid)

    def select(self, years=None, sites=None, dates=None) -> np.ndarray:
        keep = np.ones(len(self), dtype=bool)
        if years is not None:
            yr = np.array([dt.date.fromordinal(int(o)).year for o in self.ordinal])
            keep &= np.isin(yr, list(years))
        if sites is not None:
            keep &= np.isin(self.site_id, list(sites))
        if dates is not None:
            lo, hi = dates
            keep &= (self.ordinal >= lo.toordinal()) & (self.ordinal <= hi.toordinal())
        return np.flatnonzero(keep)

    def save(self, path: Path):
        save_npz(path, {"modality": np.array(self.modality), "site_id": self.site_id, "lat": self.lat,
                        "lon": self.lon, "ordinal": self.ordinal, "samples": self.samples,
                        "resolution": np.array(self.resolution), "flags": self.flags})

    @classmethod
    def load(cls, path: Path) -> "Corpus":
        _require(path, "normalized corpus (run `lightloc ingest`)")
        with np.load(path, allow_pickle=False) as z:
            return cls(str(z["modality"]), z["site_id"], z["lat"], z["lon"], z["ordinal"], z["samples"],
                       float(z["resolution"]), z["flags"])


def _normalized_path(cfg: PipelineConfig, modality: str) -> Path:
    return cfg.path("corpus") / "normalized" / f"{MODALITY_DIRS[modality]}.npz"


def _truth_path(cfg: PipelineConfig) -> Path:
    return cfg.path("corpus") / "truth.json"


def load_truth(path: Path) -> dict:
    _require(path, "ground-truth manifest")
    data = json.loads(path.read_text())
    return {s["site_id"]: GeoCoord(s["lat"], s["lon"]) for s in data["sites"]}


# --------------------------------------------------------------------------- #
# ingestion


def _parse_raw(path: Path):
    """Rows of a raw CSV grouped by (site_id, date); returns (groups, malformed line numbers)."""
    groups: dict = defaultdict(lambda: {"t": [], "v": []})
    coords: dict = {}
    bad = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RAW_HEADER:
            raise InputError(f"{path}:1: header must be {','.join(RAW_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != 6:
                    raise ValueError("wrong field count")
                sid, lat, lon, date, t, v = row
                coord = GeoCoord(float(lat), float(lon))
                date = dt.date.fromisoformat(date)
                t, v = float(t), float(v)
                if not (0 <= t < 86400) or not np.isfinite(v):
                    raise ValueError("timestamp outside the day or non-finite value")
            except ValueError:
                bad.append(lineno)
                continue
            if not in_coarse_extent(coord):
                raise InputError(f"{path}:{lineno}: site {sid} at {coord.as_tuple()} outside the study extent")
            if coords.setdefault(sid, coord) != coord:
                raise InputError(f"{path}:{lineno}: site {sid} changes coordinates")
            g = groups[(sid, date)]
            g["t"].append(t)
            g["v"].append(v)
    return groups, coords, bad


def _infer_step(times: np.ndarray) -> float:
    d = np.diff(np.unique(times))
    if len(d) == 0:
        raise ValueError("fewer than two samples")
    step = float(np.median(d))
    if step <= 0 or abs(86400 / step - round(86400 / step)) > 1e-6:
        raise ValueError(f"sample interval {step} s does not divide a day")
    return step


def normalize_day(modality: str, coord: GeoCoord, date: dt.date, times, values):
    """Place one day's raw samples on their regular grid and resample to the canonical resolution.

    Returns ``(samples, raw_step_seconds, missing_fraction, flags)``.
    Interior gaps are linearly interpolated; light gaps touching midnight are
    filled from the clear-sky model and flagged ``edge-extrapolated``.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    step = _infer_step(times)
    n = int(round(86400 / step))
    slot = np.floor(times / step + 1e-9).astype(np.int64)
    grid = np.full(n, np.nan)
    grid[slot] = values  # duplicates: last row wins
    have = np.isfinite(grid)
    missing = 1.0 - have.sum() / n
    flags = []
    if missing > 0 and missing <= MAX_MISSING_FRACTION:
        idx = np.arange(n)
        first, last = np.flatnonzero(have)[[0, -1]]
        inner = ~have & (idx > first) & (idx < last)
        grid[inner] = np.interp(idx[inner], idx[have], grid[have])
        edge = ~np.isfinite(grid)
        if edge.any():
            if modality == "light":
                minutes = (idx[edge] + 0.5) * step / 60.0
                grid[edge] = clear_sky_lux(solar_elevation(coord, date, minutes))
            else:
                grid[edge] = np.interp(idx[edge], idx[have], grid[have], period=n)
            flags.append("edge-extrapolated")
    if missing > MAX_MISSING_FRACTION:
        return None, step, missing, flags
    res = step / 60.0
    if modality == "light":
        rec = resample(DailyLightRecord(date, np.maximum(grid, 0.0), res, coord), CANONICAL_LIGHT_RES)
    else:
        rec = resample(DailyTempRecord(date, grid, res, coord), CANONICAL_TEMP_RES)
    return rec.samples, step, missing, flags


def ingest_files(modality: str, files) -> tuple[Corpus, list[dict], list[str]]:
    """Normalize raw CSV files; returns the corpus, manifest entries and log lines."""
    rows = []
    manifest = []
    notes = []
    errors = []
    for path in sorted(Path(f) for f in files):
        try:
            groups, coords, bad = _parse_raw(path)
        except InputError as exc:
            errors.append(str(exc))
            continue
        if bad:
            shown = ", ".join(str(b) for b in bad[:20]) + (" ..." if len(bad) > 20 else "")
            if not groups:
                errors.append(f"{path}: no parseable rows; malformed lines {shown}")
                continue
            notes.append(f"{path}: skipped {len(bad)} malformed rows (lines {shown})")
        per_site = defaultdict(list)
        for (sid, date), g in sorted(groups.items()):
            try:
                samples, step, missing, flags = normalize_day(modality, coords[sid], date, g["t"], g["v"])
            except ValueError as exc:
                notes.append(f"{path}: {sid} {date}: dropped ({exc})")
                continue
            if samples is None:
                notes.append(f"{path}: {sid} {date}: dropped, {missing:.0%} of samples missing")
                continue
            rows.append((sid, coords[sid], date, samples, ";".join(flags)))
            per_site[sid].append((date, step))
        for sid, days in sorted(per_site.items()):
            steps = sorted({s for _, s in days})
            manifest.append({
                "file": str(path), "site_id": sid, "lat": coords[sid].lat, "lon": coords[sid].lon,
                "modality": modality, "first_date": days[0][0].isoformat(), "last_date": days[-1][0].isoformat(),
                "days": len(days), "raw_resolution_s": steps[0] if len(steps) == 1 else steps,
            })
    if errors:
        raise InputError("\n".join(errors))
    rows.sort(key=lambda r: (r[0], r[2]))
    res = CANONICAL_LIGHT_RES if modality == "light" else CANONICAL_TEMP_RES
    n = int(round(MINUTES_PER_DAY / res))
    corpus = Corpus(modality, [r[0] for r in rows], [r[1].lat for r in rows], [r[1].lon for r in rows],
                    [r[2].toordinal() for r in rows],
                    np.array([r[3] for r in rows]) if rows else np.zeros((0, n)), res, [r[4] for r in rows])
    return corpus, manifest, notes


# --------------------------------------------------------------------------- #
# commands


def cmd_synth(cfg: PipelineConfig, args) -> int:
    out = cfg.path("corpus")
    synth = cfg.synth_config()
    sites = synth_sites(cfg)
    years = cfg.data["synth"]["years"]
    n_days = 0
    try:
        with locked(out):
            for modality, folder in MODALITY_DIRS.items():
                for sid, coord in sites:
                    lines = []
                    for year in years:
                        for date in cfg.season_dates(year):
                            if modality == "light":
                                rec = synth_light(coord, date, synth, site_id=sid)
                            else:
                                rec = synth_temp(coord, date, synth, site_id=sid)
                            lines.extend(_raw_lines(sid, coord, date, rec.samples, rec.resolution))
                    write_raw_csv(out / folder / f"{sid}.csv", lines)
            n_days = sum(len(cfg.season_dates(y)) for y in years)
            truth = {
                "schema_version": SCHEMA_VERSION,
                "seed": cfg.seed,
                "synth": cfg.data["synth"],
                "sites": [{"site_id": sid, "lat": c.lat, "lon": c.lon} for sid, c in sites],
            }
            write_text(out / "truth.json", _json(truth))
    except OSError as exc:
        raise InputError(f"cannot write corpus under {out}: {exc}") from exc
    print(f"synthetic corpus: {len(sites)} sites, {len(years)} years, {n_days} days per site, "
          f"{len(sites) * n_days} records per modality -> {out}")
    return EXIT_OK


def cmd_ingest(cfg: PipelineConfig, args) -> int:
    root = cfg.path("corpus")
    sources = {"light": args.light, "temperature": args.temp}
    for modality, folder in MODALITY_DIRS.items():
        if sources[modality] is None:
            sources[modality] = sorted((root / folder).glob("*.csv"))
    if not any(sources.values()):
        raise InputError(f"no raw CSV files given or found under {root}")
    with locked(root):
        manifest = []
        for modality, files in sources.items():
            if not files:
                continue
            corpus, entries, notes = ingest_files(modality, files)
            for line in notes:
                log.warning(line)
            corpus.save(_normalized_path(cfg, modality))
            manifest.extend(entries)
            print(f"ingested {modality}: {len(corpus)} daily records from {len(files)} files "
                  f"({len(notes)} notices)")
        write_text(root / "normalized" / "ingest_manifest.json", _json({"schema_version": SCHEMA_VERSION,
                                                                         "files": manifest}))
    return EXIT_OK


def _light_library_records(cfg, corpus: Corpus, years, daae: DaaeModel | None):
    for i in corpus.select(years=years):
        rec = resample(log_light(corpus.record(i)), CANONICAL_LIGHT_RES)
        if daae is not None:
            from .daae import denoise
            rec = denoise(daae, rec)
        yield rec


def _station_client(cfg: PipelineConfig):
    st = cfg.data["stations"]
    if st["source"] == "synthetic":
        spacing = float(st["spacing_deg"])
        lats = np.arange(COARSE_LAT[0], COARSE_LAT[1] + 1e-9, spacing)
        lons = np.arange(COARSE_LON[0], COARSE_LON[1] + 1e-9, spacing)
        stations = [GeoCoord(float(a), float(b)) for a in lats for b in lons]
        return SyntheticStationClient(stations, noise_free(cfg.synth_config()))
    if st["source"] == "fixture":
        if not st["fixture_dir"]:
            raise InputError("stations.fixture_dir is required for fixture stations")
        return FixtureStationClient(_require(cfg.root / st["fixture_dir"], "station fixture directory"))
    if st["source"] == "live":
        try:
            return LiveStationClient()
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    raise InputError(f"unknown stations.source {st['source']!r}")


def _corpus_dates(cfg: PipelineConfig, years) -> list[dt.date]:
    out = []
    for y in years:
        out.extend(cfg.season_dates(y))
    return out


def cmd_build_reflib(cfg: PipelineConfig, args) -> int:
    libdir = cfg.path("libraries")
    split = cfg.data["split"]
    with locked(libdir):
        if args.modality in ("light", "all"):
            corpus = Corpus.load(_normalized_path(cfg, "light"))
            daae = None
            if cfg.data["reflib"]["denoise"]:
                daae = DaaeModel.load(_require(cfg.path("models") / "daae.ckpt", "DAAE checkpoint"))
            lib = ReferenceLibrary("light")
            for rec in _light_library_records(cfg, corpus, split["train_years"], daae):
                lib.add(rec)
            if lib.n_parents == 0:
                raise InputError(f"no light records in training years {split['train_years']}")
            lons = cfg.data["reflib"]["synth_lons"]
            lib.synthesize_all(lons) if lons else lib.synthesize_all()
            m = lib.save(libdir / "light.npz")
            print(f"light library: {m['stored']} measured, {m['synthesized']} longitude-synthesized")
        if args.modality in ("temperature", "all"):
            client = _station_client(cfg)
            cache_dir = cfg.data["stations"]["cache_dir"]
            cache = StationCache(cfg.root / cache_dir) if cache_dir else None
            dates = _corpus_dates(cfg, split["train_years"] + split["test_years"])
            lib, unavailable = build_temp_reference(cfg.grid().centers(), dates, client, cache=cache,
                                                    k=cfg.data["k"]["kriging"])
            if lib.n_parents == 0:
                raise MissingArtifact("no station data available for any cell")
            m = lib.save(libdir / "temp.npz")
            hist = m["provenance"]
            print(f"temperature library: {hist.get('measured', 0)} station days, {hist.get('kriged', 0)} kriged, "
                  f"{len(unavailable)} cell-days unavailable")
    return EXIT_OK


def _clean_twins(cfg: PipelineConfig, corpus: Corpus, idx: np.ndarray, noisy: np.ndarray) -> tuple[np.ndarray, str]:
    truth = _truth_path(cfg)
    if truth.exists():
        meta = json.loads(truth.read_text())
        synth = PipelineConfig(_merge(DEFAULT_CONFIG, {"synth": meta["synth"], "seed": meta["seed"]}),
                               cfg.root).synth_config()
        clean_cfg = noise_free(synth)
        out = []
        for i in idx:
            rec = corpus.record(i)
            out.append(log_light(synth_light(rec.coord, rec.date, clean_cfg)).samples)
        return np.array(out), "synthetic noise-free twins"
    return np.array([pseudo_clean(x) for x in noisy]), "median-filtered pseudo-clean targets"


def _write_log(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[0]] + [f"{v:.8g}" for v in r[1:]])
    write_text(path, buf.getvalue())


def _read_log(path: Path) -> list[list]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [[int(r[0])] + [float(v) for v in r[1:]] for r in rows]


def _save_optim(path: Path, optimizers, epoch: int):
    tensors = {}
    for k, opt in enumerate(optimizers):
        tensors.update({f"{k}|{name}": v for name, v in opt.state_dict().items()})
    save_checkpoint(path, tensors, {"kind": "optimizer", "epochs_done": epoch})


def _load_optim(path: Path, optimizers) -> int:
    tensors, meta = load_checkpoint(_require(path, "optimizer state for --resume"))
    for k, opt in enumerate(optimizers):
        prefix = f"{k}|"
        opt.load_state_dict({n[len(prefix):]: v for n, v in tensors.items() if n.startswith(prefix)})
    return int(meta["epochs_done"])


def _train_daae(cfg: PipelineConfig, args):
    t = cfg.data["training"]["daae"]
    models = cfg.path("models")
    corpus = Corpus.load(_normalized_path(cfg, "light"))
    idx = corpus.select(years=cfg.data["split"]["train_years"])
    if len(idx) == 0:
        raise InputError("no light records in the training years")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 21]))
    if len(idx) > t["max_days"]:
        idx = np.sort(rng.choice(idx, t["max_days"], replace=False))
    noisy = np.array([resample(log_light(corpus.record(i)), CANONICAL_LIGHT_RES).samples for i in idx])
    clean, how = _clean_twins(cfg, corpus, idx, noisy)
    tc = DaaeTrainConfig(epochs=t["epochs"], batch_size=t["batch"], lr=t["lr"], step_size=t["step_size"],
                         gamma=t["gamma"], adv_weight=t["adv_weight"], seed=cfg.seed)
    ckpt = models / "daae.ckpt"
    history = []
    if args.resume:
        model = DaaeModel.load(_require(ckpt, "DAAE checkpoint for --resume"))
        opts = make_optimizers(model, tc)
        start = _load_optim(models / "daae.optim", opts)
        history = [r[1:] for r in _read_log(models / "daae_log.csv")][:start]
    else:
        model, opts, start = DaaeModel(seed=cfg.seed), None, 0
        opts = make_optimizers(model, tc)
    model, hist = train_daae(noisy, clean, tc, model, optimizers=opts, start_epoch=start)
    history = list(history) + [list(h) for h in hist]
    model.save(ckpt, {"training": {**t, "days": int(len(idx)), "targets": how}})
    _save_optim(models / "daae.optim", opts, tc.epochs)
    _write_log(models / "daae_log.csv", ["epoch", "recon_loss", "disc_objective"],
               [[e + 1, *h] for e, h in enumerate(history)])
    print(f"daae: {len(idx)} days ({how}), {tc.epochs} epochs, final recon {history[-1][0]:.5f}"
          if history else "daae: no epochs run")


def _train_siamese(cfg: PipelineConfig, args, stage: str):
    t = cfg.data["training"][stage]
    modality = "light" if stage == "light" else "temperature"
    models = cfg.path("models")
    lib = ReferenceLibrary.load(_require(cfg.path("libraries") / f"{stage}.npz",
                                         f"{modality} reference library (run `lightloc build-reflib`)"))
    targets = None
    if modality == "temperature":
        corpus = Corpus.load(_normalized_path(cfg, "temperature"))
        targets = [corpus.record(i) for i in corpus.select(years=cfg.data["split"]["train_years"])]
    policy = PairPolicy(n_pairs=t["n_pairs"], hard_fraction=t["hard_fraction"],
                        window_days=cfg.data["grid"]["window_days"])
    try:
        pairs = make_pairs(lib, policy, seed=cfg.seed, targets=targets)
    except ValueError as exc:
        raise InputError(f"{stage} pairs: {exc}") from exc
    tc = SiameseTrainConfig(epochs=t["epochs"], batch_pairs=t["batch"], lr=t["lr"], step_size=t["step_size"],
                            gamma=t["gamma"], seed=cfg.seed)
    ckpt = models / f"{stage}.ckpt"
    history = []
    if args.resume:
        model = SiameseModel.load(_require(ckpt, f"{stage} checkpoint for --resume"))
        opt = make_optimizer(model, tc)
        start = _load_optim(models / f"{stage}.optim", [opt])
        history = [r[1] for r in _read_log(models / f"{stage}_log.csv")][:start]
    else:
        model = SiameseModel.create(modality, seed=cfg.seed, margin=float(t["m"]))
        opt, start = make_optimizer(model, tc), 0
    model, hist = train_siamese(model, pairs, tc, optimizer=opt, start_epoch=start)
    history = list(history) + list(hist)
    model.save(ckpt, {"training": {**t, "pairs": len(pairs)}})
    _save_optim(models / f"{stage}.optim", [opt], tc.epochs)
    _write_log(models / f"{stage}_log.csv", ["epoch", "loss"], [[e + 1, h] for e, h in enumerate(history)])
    print(f"{stage}: {len(pairs)} pairs, {tc.epochs} epochs, final loss "
          f"{history[-1] if history else float('nan'):.5f}, sigma {model.sigma:.5g}")


def cmd_train(cfg: PipelineConfig, args) -> int:
    with locked(cfg.path("models")):
        try:
            if args.stage == "daae":
                _train_daae(cfg, args)
            else:
                _train_siamese(cfg, args, args.stage)
        except (DaaeDiverged, SiameseDiverged, FloatingPointError) as exc:
            raise NumericalFailure(f"training diverged: {exc}") from exc
    return EXIT_OK


# -- localization -----------------------------------------------------------

COLORMAP = np.array([[0, 0, 255], [255, 255, 0], [255, 0, 0]], dtype=np.float64)  # low, mid, high


def colorize(values: np.ndarray) -> np.ndarray:
    """Blue -> yellow -> red for values scaled to [0, 1]; returns uint8 RGB."""
    v = np.clip(np.nan_to_num(values, nan=0.0), 0.0, 1.0)
    pos = v * 2.0
    lo = np.minimum(pos.astype(int), 1)
    frac = (pos - lo)[..., None]
    rgb = COLORMAP[lo] * (1 - frac) + COLORMAP[lo + 1] * frac
    return np.round(rgb).astype(np.uint8)


def heatmap_csv(m: LikelihoodMap) -> str:
    lats, lons = m.grid.lats, m.grid.lons
    buf = io.StringIO()
    buf.write("lat,lon,value,mask\n")
    for i, la in enumerate(lats):
        for j, lo in enumerate(lons):
            buf.write(f"{la:.4f},{lo:.4f},{m.values[i, j]:.10e},{int(m.mask[i, j])}\n")
    return buf.getvalue()


def write_heatmap_png(m: LikelihoodMap, path: Path, scale: int = 2):
    from PIL import Image

    v = m.values
    top = v.max()
    img = colorize(v / top if top > 0 else v)[::-1]  # north up
    im = Image.fromarray(img, "RGB")
    if scale > 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    path.write_bytes(buf.getvalue())


def _load_models(cfg: PipelineConfig, need_light: bool, need_temp: bool):
    mdir, ldir = cfg.path("models"), cfg.path("libraries")
    models, libs = Models(), Libraries()
    try:
        if need_light:
            models.light = SiameseModel.load(_require(mdir / "light.ckpt", "light model"))
            libs.light = ReferenceLibrary.load(_require(ldir / "light.npz", "light library"))
        if need_temp:
            models.temp = SiameseModel.load(_require(mdir / "temp.ckpt", "temperature model"))
            libs.temp = ReferenceLibrary.load(_require(ldir / "temp.npz", "temperature library"))
        if (mdir / "daae.ckpt").exists() and cfg.data["reflib"]["denoise"]:
            models.daae = DaaeModel.load(mdir / "daae.ckpt")
    except CheckpointError as exc:
        raise MissingArtifact(f"unreadable checkpoint: {exc}") from exc
    for m in (models.light, models.temp):
        if m is not None and m.sigma is None:
            raise MissingArtifact(f"{m.modality} model has no calibrated sigma")
    return models, libs


_WORKER: dict = {}


def _localize_one(task):
    loc: Localizer = _WORKER["loc"]
    light, temp, date = task
    try:
        return loc.fused(light, temp, date)
    except (ValueError, PolarDayError) as exc:
        return exc


def cmd_localize(cfg: PipelineConfig, args) -> int:
    out = Path(args.out_dir) if args.out_dir else cfg.path("outputs") / "results"
    light_c = Corpus.load(_normalized_path(cfg, "light")) if args.modality in ("light", "fused") else None
    temp_c = Corpus.load(_normalized_path(cfg, "temperature")) if args.modality in ("temperature", "fused") else None
    models, libs = _load_models(cfg, light_c is not None, temp_c is not None)
    years = None if args.dates else cfg.data["split"]["test_years"]
    dates = _parse_date_range(args.dates) if args.dates else None
    sites = args.sites.split(",") if args.sites else None
    tasks = {}
    for corpus, slot in ((light_c, 0), (temp_c, 1)):
        if corpus is None:
            continue
        for i in corpus.select(years=years, sites=sites, dates=dates):
            key = (str(corpus.site_id[i]), int(corpus.ordinal[i]))
            tasks.setdefault(key, [None, None])[slot] = corpus.record(i)
    if args.limit:
        tasks = dict(sorted(tasks.items())[:args.limit])
    if not tasks:
        raise InputError("no target days match the selection")
    g = cfg.data["grid"]
    loc = Localizer(models, libs, refine_step=g["refine_step"], window_days=g["window_days"])
    keys = sorted(tasks)
    work = [(tasks[k][0], tasks[k][1], dt.date.fromordinal(k[1])) for k in keys]
    _WORKER["loc"] = loc
    if args.jobs > 1 and "fork" in multiprocessing.get_all_start_methods():
        with multiprocessing.get_context("fork").Pool(args.jobs) as pool:
            results = pool.map(_localize_one, work, chunksize=max(1, len(work) // (4 * args.jobs)))
    else:
        results = [_localize_one(w) for w in work]
    trajectories = defaultdict(list)
    failed = 0
    with locked(out):
        for (sid, ordinal), res in zip(keys, results):
            date = dt.date.fromordinal(ordinal)
            stem = out / sid / date.isoformat()
            if isinstance(res, Exception):
                failed += 1
                log.warning("%s %s: %s", sid, date, res)
                write_text(stem.with_suffix(".json"), _json({"site_id": sid, "date": date.isoformat(),
                                                             "error": str(res)}))
                continue
            doc = res.to_json()
            doc["site_id"] = sid
            write_text(stem.with_suffix(".json"), _json(doc))
            for name, m in (("fused", res.fused_map), ("light", res.light_map), ("temperature", res.temp_map)):
                if m is None:
                    continue
                write_text(Path(f"{stem}_{name}.csv"), heatmap_csv(m))
                if not args.no_png:
                    write_heatmap_png(m, Path(f"{stem}_{name}.png"))
            trajectories[sid].append(res)
        for sid, rows in trajectories.items():
            buf = io.StringIO()
            buf.write("date,lat,lon,baseline_lat,baseline_lon,degraded\n")
            for r in rows:
                b = r.baseline_estimate
                bl = f"{b.lat:.6f},{b.lon:.6f}" if b is not None else ","
                buf.write(f"{r.date.isoformat()},{r.estimate.lat:.6f},{r.estimate.lon:.6f},{bl},{int(r.degraded)}\n")
            write_text(out / sid / "trajectory.csv", buf.getvalue())
    print(f"localized {len(keys) - failed} of {len(keys)} days -> {out}")
    if failed == len(keys):
        raise NumericalFailure("every localization failed")
    return EXIT_OK


# -- evaluation -------------------------------------------------------------


def _reference_points(cfg: PipelineConfig) -> np.ndarray:
    path = cfg.path("libraries") / "light.npz"
    if path.exists():
        with np.load(path, allow_pickle=False) as z:
            pts = np.stack([z["lat"], z["lon"]], axis=1)
        return np.unique(pts, axis=0)
    truth = load_truth(_truth_path(cfg))
    return np.array(sorted(c.as_tuple() for c in truth.values()))


def load_results(results_dir: Path, truth: dict, refs: np.ndarray, k: int, which: str = "estimate"):
    _require(results_dir, "results directory")
    samples = []
    for p in sorted(results_dir.glob("*/*.json")):
        doc = json.loads(p.read_text())
        if "error" in doc or doc.get(which) is None:
            continue
        sid = doc["site_id"]
        if sid not in truth:
            raise MissingArtifact(f"{p}: site {sid} has no ground truth")
        t = truth[sid]
        est = GeoCoord(doc[which]["lat"], doc[which]["lon"])
        samples.append(ErrorSample(dt.date.fromisoformat(doc["date"]), t, est, isolation_score(t, refs, k)))
    if not samples:
        raise MissingArtifact(f"no localization results under {results_dir}")
    return samples


def write_reports(report_dir: Path, samples, k_mi: int, baseline=None):
    mae = overall_mae(samples)
    write_text(report_dir / "overall.txt", format_overall(mae) + "\n")
    write_text(report_dir / "overall.json", _json({"mae_lat": mae[0], "mae_lon": mae[1], "n": len(samples)}))
    write_text(report_dir / "biweekly.csv", biweekly_csv(biweekly_mae(samples)))
    cdf = error_cdf(samples)
    buf = io.StringIO()
    buf.write("axis,error_deg,fraction\n")
    for axis in ("lat", "lon"):
        for e, f in zip(*cdf[axis]):
            buf.write(f"{axis},{e:.6f},{f:.6f}\n")
    write_text(report_dir / "cdf.csv", buf.getvalue())
    rows, skipped = {}, []
    for name, group in (("Our model", samples), ("Threshold baseline", baseline)):
        if not group:
            continue
        try:
            rows[name] = bias_report(group, k_neighbors=k_mi)
        except ValueError as exc:
            skipped.append(f"{name}: bias report unavailable: {exc}")
    notes = "".join(f"{line}\n" for line in skipped)
    if not rows:
        write_text(report_dir / "bias_table.txt", notes)
        return mae, None
    write_text(report_dir / "bias_table.txt", format_bias_table(rows) + notes)
    write_text(report_dir / "bias.csv", bias_csv(rows))
    return mae, rows


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    results = Path(args.results) if args.results else cfg.path("outputs") / "results"
    report = Path(args.report_dir) if args.report_dir else cfg.path("outputs") / "report"
    truth = load_truth(Path(args.truth) if args.truth else _truth_path(cfg))
    refs = _reference_points(cfg)
    k = cfg.data["k"]
    samples = load_results(results, truth, refs, k["isolation"])
    try:
        baseline = load_results(results, truth, refs, k["isolation"], which="baseline_estimate")
    except MissingArtifact:
        baseline = None
    with locked(report):
        mae, rows = write_reports(report, samples, k["mi"], baseline)
    print(format_overall(mae))
    if rows:
        print(format_bias_table(rows), end="")
    return EXIT_OK


def cmd_bias_report(cfg: PipelineConfig, args) -> int:
    truth = load_truth(Path(args.truth) if args.truth else _truth_path(cfg))
    refs = _reference_points(cfg)
    k = cfg.data["k"]
    rows = {}
    specs = args.method or [f"Our model={cfg.path('outputs') / 'results'}"]
    for spec in specs:
        name, _, path = spec.partition("=")
        if not path:
            raise InputError(f"--method takes NAME=RESULTS_DIR, got {spec!r}")
        which = "baseline_estimate" if name.strip().lower().startswith("threshold") else "estimate"
        samples = load_results(Path(path), truth, refs, k["isolation"], which)
        try:
            rows[name.strip()] = bias_report(samples, k_neighbors=k["mi"])
        except ValueError as exc:
            raise InputError(f"{name}: {exc}") from exc
    text = format_bias_table(rows)
    if args.report_dir:
        with locked(Path(args.report_dir)):
            write_text(Path(args.report_dir) / "bias_table.txt", text)
            write_text(Path(args.report_dir) / "bias.csv", bias_csv(rows))
    print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# entry point


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # the verb-level copies must not overwrite flags given before the verb
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=d(None), help="pipeline configuration (JSON)")
        g.add_argument("--seed", type=int, default=d(None), help="override the configuration's seed")
        g.add_argument("--jobs", type=int, default=d(1), help="worker processes for per-day work")
        g.add_argument("--out", default=d(None),
                       help="base directory for relative paths (default: the config's directory)")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return g

    common = global_flags(True)
    p = argparse.ArgumentParser(prog="lightloc", parents=[global_flags(False)],
                                description="Light and temperature based geolocation pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    sub = p.add_subparsers(dest="verb")

    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")

    q = sub.add_parser("ingest", parents=[common], help="normalize raw CSV files")
    q.add_argument("--light", nargs="*", help="raw light CSVs (default: <corpus>/light/*.csv)")
    q.add_argument("--temp", nargs="*", help="raw temperature CSVs (default: <corpus>/temp/*.csv)")

    q = sub.add_parser("build-reflib", parents=[common], help="build reference libraries")
    q.add_argument("--modality", choices=("light", "temperature", "all"), default="all")

    q = sub.add_parser("train", parents=[common], help="train one model")
    q.add_argument("--stage", choices=("daae", "light", "temp"), required=True)
    q.add_argument("--resume", action="store_true", help="continue from the saved checkpoint and optimizer state")

    q = sub.add_parser("localize", parents=[common], help="localize target days")
    q.add_argument("--dates", help="YYYY-MM-DD or YYYY-MM-DD:YYYY-MM-DD (default: the test years)")
    q.add_argument("--sites", help="comma-separated site ids (default: all)")
    q.add_argument("--modality", choices=("light", "temperature", "fused"), default="fused")
    q.add_argument("--limit", type=int, default=0, help="localize at most this many days")
    q.add_argument("--out-dir", help="results directory (default: <outputs>/results)")
    q.add_argument("--no-png", action="store_true", help="skip PNG heatmaps")

    q = sub.add_parser("evaluate", parents=[common], help="error tables and bias report")
    q.add_argument("--results", help="results directory (default: <outputs>/results)")
    q.add_argument("--truth", help="ground-truth manifest (default: <corpus>/truth.json)")
    q.add_argument("--report-dir", help="report directory (default: <outputs>/report)")

    q = sub.add_parser("bias-report", parents=[common], help="bias report table for one or more result sets")
    q.add_argument("--method", action="append", help="NAME=RESULTS_DIR; repeatable. Names starting with "
                   "'Threshold' use the baseline estimates")
    q.add_argument("--truth", help="ground-truth manifest (default: <corpus>/truth.json)")
    q.add_argument("--report-dir", help="also write bias_table.txt and bias.csv here")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "build-reflib": cmd_build_reflib,
    "train": cmd_train,
    "localize": cmd_localize,
    "evaluate": cmd_evaluate,
    "bias-report": cmd_bias_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = PipelineConfig.load(args.config, args.out, args.seed)
        if args.dump_config:
            print(_json(cfg.data), end="")
            return EXIT_OK
        if args.verb is None:
            parser.print_help()
            return EXIT_INPUT
        if args.jobs < 1:
            raise InputError("--jobs must be >= 1")
        return COMMANDS[args.verb](cfg, args)
    except CliError as exc:
        print(f"lightloc: error: {exc}", file=sys.stderr)
        return exc.code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"lightloc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
