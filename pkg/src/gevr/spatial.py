"""Circles on the sphere: membership, aggregation, filter grids, mutation.

All distances are great-circle (haversine) kilometres with a spherical
Earth of radius 6371 km. Circle membership is a closed disc: a cell
belongs to a circle iff the haversine distance from the cell center to
the circle center is <= the radius.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError
from .raster import GeoGrid, RasterSeries, StandardizationParams, day_provenance

EARTH_RADIUS_KM = 6371.0
RADIUS_MAX_KM = 1000.0


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; accepts scalars or arrays."""
    lat1, lon1 = np.radians(lat1), np.radians(lon1)
    lat2, lon2 = np.radians(lat2), np.radians(lon2)
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if np.ndim(d) == 0 else d


@dataclass(frozen=True)
class Circle:
    """Aggregation region: center (lat, lon) in degrees, radius in km."""

    lat: float
    lon: float
    radius_km: float

    def __post_init__(self):
        if not (0.0 <= self.radius_km <= RADIUS_MAX_KM):
            raise InvalidInputError(
                f"radius {self.radius_km} outside [0, {RADIUS_MAX_KM}] km"
            )
        if not np.isfinite(self.lat) or not np.isfinite(self.lon):
            raise InvalidInputError("circle center must be finite")


@dataclass(frozen=True)
class MembershipMask:
    """Sorted (row, col) cell indices inside a circle; never empty."""

    cells: np.ndarray  # (m, 2) int, lexicographically sorted

    def __post_init__(self):
        if len(self.cells) == 0:
            raise InvalidInputError("membership mask may not be empty")

    @property
    def rows(self):
        return self.cells[:, 0]

    @property
    def cols(self):
        return self.cells[:, 1]

    def __len__(self):
        return len(self.cells)


def _mask_from_flat(flat_idx, cols):
    flat_idx = np.sort(np.asarray(flat_idx, dtype=np.int64))
    return MembershipMask(np.column_stack([flat_idx // cols, flat_idx % cols]))


def circle_members(circle: Circle, grid: GeoGrid) -> MembershipMask:
    """Brute-force membership scan over all cell centers.

    A circle capturing no cell center snaps to its single nearest cell,
    so every circle yields a usable (non-empty) feature.
    """
    latlons = grid.cell_latlons()
    d = haversine_km(latlons[:, 0], latlons[:, 1], circle.lat, circle.lon)
    inside = np.flatnonzero(d <= circle.radius_km)
    if inside.size == 0:
        inside = np.array([int(np.argmin(d))])
    return _mask_from_flat(inside, grid.cols)


def _sphere_xyz(lat_deg, lon_deg):
    lat, lon = np.radians(lat_deg), np.radians(lon_deg)
    return EARTH_RADIUS_KM * np.column_stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)]
    )


class MembershipIndex:
    """k-d tree over cell centers for sublinear circle membership queries.

    The tree works in 3-d chord space (monotone in great-circle
    distance); candidates from a slightly inflated chord radius are
    refined with the exact haversine test, so query results are
    identical to the brute-force scan.
    """

    def __init__(self, grid: GeoGrid):
        self.grid = grid
        self._latlons = grid.cell_latlons()
        self._tree = cKDTree(_sphere_xyz(self._latlons[:, 0], self._latlons[:, 1]))

    def members(self, circle: Circle) -> MembershipMask:
        ang = min(circle.radius_km, math.pi * EARTH_RADIUS_KM) / EARTH_RADIUS_KM
        chord = 2.0 * EARTH_RADIUS_KM * math.sin(ang / 2.0)
        center = _sphere_xyz(np.array([circle.lat]), np.array([circle.lon]))[0]
        cand = np.asarray(
            self._tree.query_ball_point(center, chord * (1.0 + 1e-9) + 1e-9),
            dtype=np.int64,
        )
        if cand.size:
            d = haversine_km(
                self._latlons[cand, 0], self._latlons[cand, 1], circle.lat, circle.lon
            )
            inside = cand[np.atleast_1d(d) <= circle.radius_km]
            if inside.size:
                return _mask_from_flat(inside, self.grid.cols)
        # empty strict membership: fall back to the brute-force nearest cell
        return circle_members(circle, self.grid)


@dataclass(frozen=True)
class AggFeature:
    """A (circle, variable) aggregation with per-cell training scaling.

    mask/cell_mean/cell_std are None until the feature is fit on a
    fold's training days.
    """

    circle: Circle
    variable: int
    mask: MembershipMask | None = None
    cell_mean: np.ndarray | None = None
    cell_std: np.ndarray | None = None
    provenance: str | None = None


def fit_agg_feature(
    feature: AggFeature, raster: RasterSeries, train_days, mask: MembershipMask | None = None
) -> AggFeature:
    """Fit per-member-cell standardization over the training days."""
    if feature.variable >= raster.n_vars:
        raise InvalidInputError("feature variable index out of range")
    if mask is None:
        mask = circle_members(feature.circle, raster.grid)
    train_days = np.asarray(train_days)
    vals = raster.values[train_days][:, mask.rows, mask.cols, feature.variable]
    return AggFeature(
        circle=feature.circle,
        variable=feature.variable,
        mask=mask,
        cell_mean=vals.mean(axis=0),
        cell_std=vals.std(axis=0),
        provenance=day_provenance(train_days),
    )


def aggregate(raster: RasterSeries, feature: AggFeature, days) -> np.ndarray:
    """Per-day mean over member cells of the standardized cell values.

    Cells are scaled over time (with the feature's training params)
    before being averaged over space; constant cells contribute zeros.
    """
    if feature.mask is None:
        raise InvalidInputError("feature must be fit before aggregation")
    days = np.asarray(days)
    vals = raster.values[days][:, feature.mask.rows, feature.mask.cols, feature.variable]
    std = feature.cell_std
    safe = np.where(std > 0, std, 1.0)
    z = np.where(std > 0, (vals - feature.cell_mean) / safe, 0.0)
    return z.mean(axis=1)


@dataclass(frozen=True)
class FilterGrid:
    """R x R lattice of equal-radius circles per variable (n_vars * R^2 features)."""

    R: int
    radius_km: float
    features: tuple  # AggFeature (unfitted), variable-major order


def build_filter_grid(R: int, grid: GeoGrid, n_vars: int) -> FilterGrid:
    """Overlapping equal-radius circles on an R x R lattice of centers.

    Centers are cell-centered fractions (i + 0.5)/R of the grid extent;
    the shared radius is the largest half-diagonal over lattice cells,
    the smallest equal radius that guarantees coverage with overlap.
    """
    if R < 1 or R > min(grid.rows, grid.cols):
        raise InvalidInputError(f"R={R} outside [1, min(rows, cols)]")
    lat_extent = (grid.rows - 1) * grid.dlat
    lon_extent = (grid.cols - 1) * grid.dlon
    fr = (np.arange(R) + 0.5) / R
    lat_c = grid.lat0 + fr * lat_extent
    lon_c = grid.lon0 + fr * lon_extent
    half_dlat = lat_extent / R / 2.0
    half_dlon = lon_extent / R / 2.0
    # radius = farthest lattice-cell corner from its center (half the cell
    # diagonal, measured along the surface), maximized over the lattice
    radius = 0.0
    for la in lat_c:
        for lo in lon_c:
            for sa in (-half_dlat, half_dlat):
                for so in (-half_dlon, half_dlon):
                    radius = max(radius, haversine_km(la, lo, la + sa, lo + so))
    radius = min(radius, RADIUS_MAX_KM)
    feats = tuple(
        AggFeature(circle=Circle(float(la), float(lo), radius), variable=v)
        for v in range(n_vars)
        for la in lat_c
        for lo in lon_c
    )
    return FilterGrid(R=R, radius_km=radius, features=feats)


def _bounce_back(r: float) -> float:
    """Reflect a proposed radius into [0, 1000] km, iterating as needed."""
    while not (0.0 <= r <= RADIUS_MAX_KM):
        if r < 0.0:
            r = -r
        elif r > RADIUS_MAX_KM:
            r = 2.0 * RADIUS_MAX_KM - r
    return r


def _destination(lat, lon, bearing_rad, dist_km):
    """Great-circle destination point from (lat, lon) along a bearing."""
    delta = dist_km / EARTH_RADIUS_KM
    phi1, lam1 = math.radians(lat), math.radians(lon)
    phi2 = math.asin(
        math.sin(phi1) * math.cos(delta)
        + math.cos(phi1) * math.sin(delta) * math.cos(bearing_rad)
    )
    lam2 = lam1 + math.atan2(
        math.sin(bearing_rad) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * math.sin(phi2),
    )
    return math.degrees(phi2), math.degrees(lam2)


def mutate_circle(circle: Circle, rng: np.random.Generator, grid: GeoGrid) -> Circle:
    """Gaussian mutation of one parameter with std 0.25 * radius.

    Either the radius (bounced back into [0, 1000] km) or the center
    (displaced by |N(0, 0.25r)| km in a uniform bearing, clamped to the
    grid's coordinate bounds) is perturbed; choice is 50/50.
    """
    sigma = 0.25 * circle.radius_km
    if rng.integers(2) == 0:
        r = _bounce_back(circle.radius_km + rng.normal(0.0, sigma))
        return Circle(circle.lat, circle.lon, r)
    dist = abs(rng.normal(0.0, sigma))
    bearing = rng.uniform(0.0, 2.0 * math.pi)
    lat, lon = _destination(circle.lat, circle.lon, bearing, dist)
    lat = min(max(lat, grid.lat0), grid.lat_max)
    lon = min(max(lon, grid.lon0), grid.lon_max)
    return Circle(lat, lon, circle.radius_km)


def random_circle(rng: np.random.Generator, grid: GeoGrid, radius_max=RADIUS_MAX_KM) -> Circle:
    """Center uniform over grid cells, radius uniform in [0, radius_max]."""
    row = int(rng.integers(grid.rows))
    col = int(rng.integers(grid.cols))
    return Circle(
        float(grid.lat_of(row)), float(grid.lon_of(col)), float(rng.uniform(0.0, radius_max))
    )


def circles_to_csv(entries, path) -> None:
    """Dump (variable, Circle) pairs as CSV rows `var,lat,lon,radius_km`."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["var", "lat", "lon", "radius_km"])
        for var, c in entries:
            w.writerow([var, repr(c.lat), repr(c.lon), repr(c.radius_km)])


def circles_from_csv(path):
    import csv

    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(
                (int(rec["var"]), Circle(float(rec["lat"]), float(rec["lon"]), float(rec["radius_km"])))
            )
    return out
