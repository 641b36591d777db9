"""Raster time-series data model, standardization, folds, and binary I/O.

The in-memory representation is a dense float64 cube indexed
(day, row, col, var) plus a regular lat/lon grid. The on-disk format
stores the payload as float32 (see `save_raster`).
"""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, RasterFormatError

MAGIC = b"GEVR"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GeoGrid:
    """Regular lat/lon grid: corner coordinates plus per-step increments."""

    rows: int
    cols: int
    lat0: float
    lon0: float
    dlat: float
    dlon: float

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidInputError("grid must have at least one row and column")
        if self.dlat <= 0 or self.dlon <= 0:
            raise InvalidInputError("grid spacing must be strictly positive")
        if not (-90.0 <= self.lat0 and self.lat_max <= 90.0):
            raise InvalidInputError("latitudes must lie in [-90, 90]")
        if not (-180.0 <= self.lon0 and self.lon_max < 180.0):
            raise InvalidInputError("longitudes must lie in [-180, 180)")

    @property
    def lat_max(self) -> float:
        return self.lat0 + (self.rows - 1) * self.dlat

    @property
    def lon_max(self) -> float:
        return self.lon0 + (self.cols - 1) * self.dlon

    def lat_of(self, row):
        return self.lat0 + np.asarray(row) * self.dlat

    def lon_of(self, col):
        return self.lon0 + np.asarray(col) * self.dlon

    def cell_latlons(self):
        """(rows*cols, 2) array of cell-center (lat, lon), row-major order."""
        lats = self.lat_of(np.arange(self.rows))
        lons = self.lon_of(np.arange(self.cols))
        glat, glon = np.meshgrid(lats, lons, indexing="ij")
        return np.column_stack([glat.ravel(), glon.ravel()])


@dataclass(frozen=True)
class RasterSeries:
    """Daily multi-variable raster over a GeoGrid.

    values has shape (n_days, rows, cols, n_vars); day_year labels each
    day with its calendar year (non-decreasing).
    """

    grid: GeoGrid
    values: np.ndarray
    day_year: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 4:
            raise InvalidInputError("values must be (day, row, col, var)")
        if v.shape[1] != self.grid.rows or v.shape[2] != self.grid.cols:
            raise InvalidInputError("values shape inconsistent with grid")
        if v.shape[3] < 1:
            raise InvalidInputError("need at least one variable")
        if len(self.day_year) != v.shape[0]:
            raise InvalidInputError("day_year length must match day count")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("raster values must be finite")
        if np.any(np.diff(self.day_year) < 0):
            raise InvalidInputError("day_year must be non-decreasing")

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[3]


@dataclass(frozen=True)
class ResponseSeries:
    """One scalar response per day, with the same year labels as the raster."""

    values: np.ndarray
    day_year: np.ndarray

    def __post_init__(self):
        if len(self.values) != len(self.day_year):
            raise InvalidInputError("response and year labels differ in length")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("response values must be finite")


@dataclass(frozen=True)
class StandardizationParams:
    """Per-feature mean/std fit over training days (population std).

    `provenance` tags the training days the params were fit on, so the
    harness can assert that test-day scaling always reuses training fits.
    """

    mean: float
    std: float
    provenance: str | None = None


@dataclass(frozen=True)
class FoldSpec:
    test_year: int
    train_days: np.ndarray
    test_days: np.ndarray


def day_provenance(train_days) -> str:
    """Stable tag identifying a set of training days."""
    arr = np.asarray(train_days, dtype=np.int64)
    return hashlib.sha1(arr.tobytes()).hexdigest()[:16]


def make_folds(day_year) -> list[FoldSpec]:
    """One leave-one-year-out fold per distinct year label."""
    day_year = np.asarray(day_year)
    years = np.unique(day_year)
    if len(years) < 2:
        raise InvalidInputError("need at least 2 distinct years to build folds")
    folds = []
    for y in years:
        test = np.flatnonzero(day_year == y)
        train = np.flatnonzero(day_year != y)
        folds.append(FoldSpec(test_year=int(y), train_days=train, test_days=test))
    return folds


def standardize_fit(series, train_days) -> StandardizationParams:
    """Mean/std of `series` over `train_days` only (divisor n)."""
    train_days = np.asarray(train_days)
    if train_days.size == 0:
        raise InvalidInputError("cannot fit standardization on an empty training set")
    x = np.asarray(series, dtype=float)[train_days]
    return StandardizationParams(
        mean=float(x.mean()),
        std=float(x.std()),
        provenance=day_provenance(train_days),
    )


def standardize_apply(value, params: StandardizationParams):
    """(value - mean) / std; constant features (std == 0) map to 0."""
    value = np.asarray(value, dtype=float)
    if params.std == 0.0:
        return np.zeros_like(value) if value.ndim else 0.0
    out = (value - params.mean) / params.std
    return out if out.ndim else float(out)


def save_raster(series: RasterSeries, path) -> None:
    """Write the binary raster format.

    Layout: magic "GEVR", version byte, little-endian uint32 counts
    (days, rows, cols, vars), four float64 grid parameters
    (lat0, lon0, dlat, dlon), int32 year per day, then a row-major
    float32 payload ordered (day, row, col, var).
    """
    g = series.grid
    header = MAGIC + struct.pack(
        "<B4I4d",
        FORMAT_VERSION,
        series.n_days,
        g.rows,
        g.cols,
        series.n_vars,
        g.lat0,
        g.lon0,
        g.dlat,
        g.dlon,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(series.day_year, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(series.values, dtype="<f4").tobytes())


def load_raster(path) -> RasterSeries:
    with open(path, "rb") as fh:
        raw = fh.read()
    head_len = 4 + struct.calcsize("<B4I4d")
    if len(raw) < head_len or raw[:4] != MAGIC:
        raise RasterFormatError("not a raster file (bad magic or truncated header)")
    version, days, rows, cols, nvars, lat0, lon0, dlat, dlon = struct.unpack(
        "<B4I4d", raw[4:head_len]
    )
    if version != FORMAT_VERSION:
        raise RasterFormatError(f"unsupported format version {version}")
    year_bytes = days * 4
    payload_entries = days * rows * cols * nvars
    expected = head_len + year_bytes + payload_entries * 4
    if len(raw) != expected:
        raise RasterFormatError(
            f"payload length mismatch: expected {expected} bytes, found {len(raw)}"
        )
    day_year = np.frombuffer(raw, dtype="<i4", count=days, offset=head_len)
    values = np.frombuffer(
        raw, dtype="<f4", count=payload_entries, offset=head_len + year_bytes
    )
    if not np.all(np.isfinite(values)):
        raise RasterFormatError("payload contains non-finite values")
    try:
        grid = GeoGrid(rows, cols, lat0, lon0, dlat, dlon)
        return RasterSeries(
            grid=grid,
            values=values.astype(np.float64).reshape(days, rows, cols, nvars),
            day_year=day_year.astype(np.int64),
        )
    except InvalidInputError as exc:
        raise RasterFormatError(f"inconsistent header: {exc}") from exc


def save_response(resp: ResponseSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "year", "value"])
        for day, (year, value) in enumerate(zip(resp.day_year, resp.values)):
            w.writerow([day, int(year), repr(float(value))])


def load_response(path) -> ResponseSeries:
    years, values = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["day", "year", "value"]:
            raise RasterFormatError("response CSV must have header day,year,value")
        for rec in reader:
            years.append(int(rec["year"]))
            values.append(float(rec["value"]))
    return ResponseSeries(values=np.array(values), day_year=np.array(years))
