"""Error statistics and the dependence of localization error on reference density."""
from __future__ import annotations

import csv
import datetime as dt
import io
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .geo import GeoCoord

ISOLATION_K = 5
MI_NEIGHBORS = 3
MI_JITTER = 1e-10
BIN_DAYS = 14


class DependenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ErrorSample:
    date: dt.date
    truth: GeoCoord
    estimate: GeoCoord
    isolation: float = float("nan")

    @property
    def abs_err_lat(self) -> float:
        return abs(self.estimate.lat - self.truth.lat)

    @property
    def abs_err_lon(self) -> float:
        return abs(self.estimate.lon - self.truth.lon)


def isolation_score(truth: GeoCoord, refs, k: int = ISOLATION_K) -> float:
    """Mean degree-space distance from ``truth`` to its ``k`` nearest reference points.

    ``refs`` is a sequence of GeoCoord or an ``(n, 2)`` array of (lat, lon).
    With fewer than ``k`` references all of them are used and a warning is issued.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = np.array([c.as_tuple() for c in refs]) if len(refs) and isinstance(refs[0], GeoCoord) else np.asarray(refs)
    if len(pts) == 0:
        raise ValueError("no reference points")
    if len(pts) < k:
        warnings.warn(f"only {len(pts)} references for k={k}; using all", DependenceWarning, stacklevel=2)
        k = len(pts)
    d = np.hypot(pts[:, 0] - truth.lat, pts[:, 1] - truth.lon)
    return float(np.sort(d)[:k].mean())


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("pearson needs two equal-length samples of size >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).sum()), np.sqrt((yc * yc).sum())
    if sx == 0 or sy == 0:
        raise ValueError("pearson is undefined for a constant sample")
    return float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))


def _centered_distances(v):
    d = np.abs(v[:, None] - v[None, :])
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def distance_correlation(x, y) -> float:
    """Sample distance correlation from doubly centered distance matrices.

    A constant input gives 0 with a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("distance_correlation needs two equal-length samples of size >= 2")
    a, b = _centered_distances(x), _centered_distances(y)
    dcov2 = (a * b).mean()
    dvar = (a * a).mean() * (b * b).mean()
    if dvar <= 0:
        warnings.warn("distance correlation of a constant sample set to 0", DependenceWarning, stacklevel=2)
        return 0.0
    return float(np.sqrt(max(dcov2, 0.0) / np.sqrt(dvar)))


def mutual_information(x, y, k_neighbors: int = MI_NEIGHBORS, seed: int = 0) -> float:
    """KSG (type 1) nearest-neighbor estimate of I(X; Y) in nats.

    A 1e-10 jitter breaks ties in duplicate-heavy data; negative estimates
    are clamped to 0 with a warning.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = len(x)
    if len(y) != n or n < 50:
        raise ValueError("mutual_information needs two equal-length samples of size >= 50")
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    rng = np.random.default_rng(seed)
    scale_x = max(np.std(x), 1e-300)
    scale_y = max(np.std(y), 1e-300)
    x = x / scale_x + MI_JITTER * rng.standard_normal(n)
    y = y / scale_y + MI_JITTER * rng.standard_normal(n)
    joint = np.stack([x, y], axis=1)
    eps = cKDTree(joint).query(joint, k=k_neighbors + 1, p=np.inf)[0][:, -1]
    # strictly closer than eps in each marginal
    r = np.nextafter(eps, 0)
    nx = np.array([len(v) - 1 for v in cKDTree(x[:, None]).query_ball_point(x[:, None], r, p=np.inf)])
    ny = np.array([len(v) - 1 for v in cKDTree(y[:, None]).query_ball_point(y[:, None], r, p=np.inf)])
    mi = digamma(k_neighbors) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1))
    if mi < 0:
        warnings.warn(f"negative KSG estimate {mi:.4f} clamped to 0", DependenceWarning, stacklevel=2)
        return 0.0
    return float(mi)


# --------------------------------------------------------------------------- #
# error tables


def _errors(samples):
    lat = np.array([s.abs_err_lat for s in samples])
    lon = np.array([s.abs_err_lon for s in samples])
    return lat, lon


def overall_mae(samples) -> tuple[float, float]:
    """(mae_lat, mae_lon) over every sample."""
    if not samples:
        raise ValueError("no samples")
    lat, lon = _errors(samples)
    return float(lat.mean()), float(lon.mean())


@dataclass(frozen=True)
class BinRow:
    start: dt.date
    end: dt.date  # inclusive
    mae_lat: float
    mae_lon: float
    n: int


def biweekly_mae(samples, season_start=(9, 1)) -> list[BinRow]:
    """Mean absolute error in consecutive 14-day bins from Sep 1 of the samples' season."""
    if not samples:
        raise ValueError("no samples")
    year = min(s.date for s in samples).year
    origin = dt.date(year, *season_start)
    if min(s.date for s in samples) < origin:
        origin = dt.date(year - 1, *season_start)
    offsets = np.array([(s.date - origin).days for s in samples])
    bins = offsets // BIN_DAYS
    lat, lon = _errors(samples)
    rows = []
    for b in range(int(bins.max()) + 1):
        sel = bins == b
        start = origin + dt.timedelta(days=b * BIN_DAYS)
        n = int(sel.sum())
        rows.append(BinRow(start, start + dt.timedelta(days=BIN_DAYS - 1),
                           float(lat[sel].mean()) if n else float("nan"),
                           float(lon[sel].mean()) if n else float("nan"), n))
    return rows


def error_cdf(samples) -> dict:
    """Right-continuous empirical CDF per axis: ``{"lat": (errors, F), "lon": (errors, F)}``."""
    if not samples:
        raise ValueError("no samples")
    out = {}
    for axis, err in zip(("lat", "lon"), _errors(samples)):
        e = np.sort(err)
        out[axis] = (e, np.arange(1, len(e) + 1) / len(e))
    return out


def cdf_quantile(errors, fractions, q: float) -> float:
    """Smallest error whose cumulative fraction reaches ``q``."""
    return float(errors[np.searchsorted(fractions, q - 1e-12)])


# --------------------------------------------------------------------------- #
# bias report

METRICS = ("pearson", "distance_correlation", "mutual_information")
METRIC_TITLES = {"pearson": "Pearson Correlation", "distance_correlation": "Distance Correlation",
                 "mutual_information": "Mutual Information"}


def bias_report(samples, k_neighbors: int = MI_NEIGHBORS, min_samples: int = 50) -> dict:
    """Pearson, distance correlation and KSG mutual information between each
    axis's absolute error and the isolation score.

    Returns ``{metric: (latitude, longitude)}``. The order of ``samples``
    does not matter: they are sorted by (date, truth, estimate) first so the
    KSG jitter sequence is fixed.
    """
    if len(samples) < min_samples:
        raise ValueError(f"bias report needs at least {min_samples} samples")
    samples = sorted(samples, key=lambda s: (s.date, s.truth.as_tuple(), s.estimate.as_tuple(), s.isolation))
    iso = np.array([s.isolation for s in samples])
    if not np.all(np.isfinite(iso)):
        raise ValueError("every sample needs an isolation score")
    lat, lon = _errors(samples)
    return {
        "pearson": (pearson(lat, iso), pearson(lon, iso)),
        "distance_correlation": (distance_correlation(lat, iso), distance_correlation(lon, iso)),
        "mutual_information": (mutual_information(lat, iso, k_neighbors), mutual_information(lon, iso, k_neighbors)),
    }


def _pair(v, digits=3):
    return f"({v[0]:.{digits}f}, {v[1]:.{digits}f})"


def format_bias_table(rows: dict, digits: int = 3) -> str:
    """Text table: one row per method, one (latitude, longitude) pair per metric.

    ``rows`` maps method name to a ``bias_report`` result.
    """
    header = ["Method"] + [f"{METRIC_TITLES[m]} (latitude, longitude)" for m in METRICS]
    body = [[name] + [_pair(rep[m], digits) for m in METRICS] for name, rep in rows.items()]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    line = "  ".join("-" * w for w in widths)
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([fmt(header), line] + [fmt(r) for r in body]) + "\n"


def bias_csv(rows: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "metric", "latitude", "longitude"])
    for name, rep in rows.items():
        for m in METRICS:
            w.writerow([name, m, f"{rep[m][0]:.6f}", f"{rep[m][1]:.6f}"])
    return buf.getvalue()


def format_overall(mae: tuple[float, float], digits: int = 3) -> str:
    return f"mean absolute error: {mae[0]:.{digits}f} deg latitude, {mae[1]:.{digits}f} deg longitude ({mae[0]:.{digits}f}, {mae[1]:.{digits}f})"


def biweekly_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_start", "bin_end", "mae_lat", "mae_lon", "n"])
    for r in rows:
        w.writerow([r.start.isoformat(), r.end.isoformat(), f"{r.mae_lat:.6f}", f"{r.mae_lon:.6f}", r.n])
    return buf.getvalue()
