"""Coordinates, search grids and gridded likelihood maps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Study extent of the coarse search grid (cell centers, degrees).
COARSE_LAT = (27.0, 48.0)
COARSE_LON = (-122.0, -66.0)


@dataclass(frozen=True)
class GeoCoord:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if math.isnan(lat) or math.isnan(lon):
            raise ValueError("coordinate must not be NaN")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude {lon} outside [-180, 180]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)

    def as_tuple(self) -> tuple[float, float]:
        return (self.lat, self.lon)


@dataclass(frozen=True)
class SearchGrid:
    """Regular lat/lon grid of cell centers, row-major with latitude as rows."""

    lat_start: float
    lat_step: float
    lat_count: int
    lon_start: float
    lon_step: float
    lon_count: int

    def __post_init__(self):
        if self.lat_step <= 0 or self.lon_step <= 0:
            raise ValueError("grid steps must be positive")
        if self.lat_count < 1 or self.lon_count < 1:
            raise ValueError("grid counts must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.lat_count, self.lon_count)

    @property
    def size(self) -> int:
        return self.lat_count * self.lon_count

    @property
    def lats(self) -> np.ndarray:
        return self.lat_start + self.lat_step * np.arange(self.lat_count)

    @property
    def lons(self) -> np.ndarray:
        return self.lon_start + self.lon_step * np.arange(self.lon_count)

    def center(self, i: int, j: int) -> GeoCoord:
        if not (0 <= i < self.lat_count and 0 <= j < self.lon_count):
            raise IndexError(f"cell ({i}, {j}) outside grid {self.shape}")
        return GeoCoord(self.lat_start + self.lat_step * i, self.lon_start + self.lon_step * j)

    def centers(self) -> list[GeoCoord]:
        """All cell centers in row-major order."""
        return [self.center(i, j) for i in range(self.lat_count) for j in range(self.lon_count)]

    def same_as(self, other: "SearchGrid", tol: float = 1e-9) -> bool:
        return (
            self.lat_count == other.lat_count
            and self.lon_count == other.lon_count
            and abs(self.lat_start - other.lat_start) <= tol
            and abs(self.lon_start - other.lon_start) <= tol
            and abs(self.lat_step - other.lat_step) <= tol
            and abs(self.lon_step - other.lon_step) <= tol
        )


def make_coarse_grid() -> SearchGrid:
    """The 1 degree search grid over lat 27..48 and lon -122..-66."""
    return SearchGrid(
        lat_start=COARSE_LAT[0],
        lat_step=1.0,
        lat_count=int(round(COARSE_LAT[1] - COARSE_LAT[0])) + 1,
        lon_start=COARSE_LON[0],
        lon_step=1.0,
        lon_count=int(round(COARSE_LON[1] - COARSE_LON[0])) + 1,
    )


@dataclass(frozen=True)
class LikelihoodMap:
    """Nonnegative values on a grid plus a per-cell "estimated directly" mask.

    ``mask[i, j]`` is True where the value came straight from data and False
    where it was filled by interpolation (or is still missing).
    """

    grid: SearchGrid
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("likelihood values must be finite")
        if np.any(values < 0):
            raise ValueError("likelihood values must be nonnegative")
        mask = np.ones(self.grid.shape, dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != self.grid.shape:
            raise ValueError(f"mask shape {mask.shape} != grid shape {self.grid.shape}")
        values.setflags(write=False)
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def normalized(self) -> "LikelihoodMap":
        total = self.total
        if total <= 0:
            raise ValueError("cannot normalize a map with zero mass")
        return LikelihoodMap(self.grid, self.values / total, self.mask)

    def value_at(self, coord: GeoCoord) -> float:
        """Value of the cell whose center is nearest to ``coord``."""
        i = int(round((coord.lat - self.grid.lat_start) / self.grid.lat_step))
        j = int(round((coord.lon - self.grid.lon_start) / self.grid.lon_step))
        i = min(max(i, 0), self.grid.lat_count - 1)
        j = min(max(j, 0), self.grid.lon_count - 1)
        return float(self.values[i, j])


def uniform_map(grid: SearchGrid) -> LikelihoodMap:
    return LikelihoodMap(grid, np.full(grid.shape, 1.0 / grid.size))


def _interp_matrix(n_old: int, ratio: int) -> np.ndarray:
    """Linear interpolation operator from n_old nodes to (n_old-1)*ratio+1 nodes."""
    n_new = (n_old - 1) * ratio + 1
    A = np.zeros((n_new, n_old))
    for i in range(n_new):
        lo, rem = divmod(i, ratio)
        if rem == 0:
            A[i, lo] = 1.0
        else:
            w = rem / ratio
            A[i, lo] = 1.0 - w
            A[i, lo + 1] = w
    return A


def refine_map(m: LikelihoodMap, step: float = 0.1) -> LikelihoodMap:
    """Bilinear upsampling of ``m`` onto a finer grid with the same extent.

    The new step must divide the coarse step of both axes; node values of the
    coarse map are reproduced exactly before renormalization.
    """
    g = m.grid
    if step <= 0 or step > min(g.lat_step, g.lon_step):
        raise ValueError(f"refinement step {step} must be in (0, coarse step]")
    ratios = []
    for coarse in (g.lat_step, g.lon_step):
        r = coarse / step
        if abs(r - round(r)) > 1e-6:
            raise ValueError(f"step {step} does not divide coarse step {coarse}")
        ratios.append(int(round(r)))
    rlat, rlon = ratios
    A_lat = _interp_matrix(g.lat_count, rlat)
    A_lon = _interp_matrix(g.lon_count, rlon)
    values = A_lat @ m.values @ A_lon.T
    # Refined cells inherit the mask of the nearest coarse node.
    near_lat = np.rint(np.arange(A_lat.shape[0]) / rlat).astype(int)
    near_lon = np.rint(np.arange(A_lon.shape[0]) / rlon).astype(int)
    mask = m.mask[np.ix_(near_lat, near_lon)]
    fine = SearchGrid(g.lat_start, g.lat_step / rlat, A_lat.shape[0], g.lon_start, g.lon_step / rlon, A_lon.shape[0])
    return LikelihoodMap(fine, np.clip(values, 0.0, None), mask).normalized()


def argmax_map(m: LikelihoodMap) -> GeoCoord:
    """Center of the maximal cell.

    Ties resolve to the lexicographically smallest (lat, lon): the grid is
    stored with ascending latitude rows and ascending longitude columns, and
    ``np.argmax`` returns the first occurrence in row-major order.
    """
    if m.values.size == 0:
        raise ValueError("empty map")
    i, j = np.unravel_index(int(np.argmax(m.values)), m.grid.shape)
    return m.grid.center(int(i), int(j))


def fuse_maps(a: LikelihoodMap, b: LikelihoodMap) -> LikelihoodMap:
    """Cellwise product of two maps on the same grid, renormalized."""
    if not a.grid.same_as(b.grid):
        raise ValueError("cannot fuse maps on different grids")
    product = a.values * b.values
    if product.sum() <= 0:
        raise ValueError("fused map has zero mass")
    return LikelihoodMap(a.grid, product, a.mask & b.mask).normalized()


def coord_distance_deg(a: GeoCoord, b: GeoCoord) -> tuple[float, float]:
    """Absolute per-axis differences in degrees (dlat, dlon)."""
    return abs(a.lat - b.lat), abs(a.lon - b.lon)


def in_coarse_extent(coord: GeoCoord) -> bool:
    return COARSE_LAT[0] <= coord.lat <= COARSE_LAT[1] and COARSE_LON[0] <= coord.lon <= COARSE_LON[1]
