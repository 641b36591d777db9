"""Synthetic raster/response generator with planted circular ground truth.

Each variable's daily field is per-day white noise smoothed by an S x S
box filter (spatial autocorrelation) plus a shared sinusoidal seasonal
term. The response applies a planted formula to the raw within-circle
means of the generated fields, one circle per variable, plus Gaussian
noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import InvalidConfigError
from .raster import GeoGrid, RasterSeries, ResponseSeries
from .spatial import Circle, circle_members, haversine_km


def _formula_cross_term(A):
    return 3.0 * A[:, 0] * A[:, 1] + 0.5 * A[:, 2]


def _formula_identity(A):
    return A[:, 0].copy()


FORMULAS = {
    "cross_term": _formula_cross_term,  # 3*A1*A2 + 0.5*A3
    "identity": _formula_identity,  # A1
}


@dataclass(frozen=True)
class PlantedTruth:
    """Ground truth recorded alongside a synthetic dataset."""

    circles: tuple  # one Circle per variable used by the formula
    formula_id: str
    noise_std: float  # effective (absolute) noise sigma

    def to_json(self, path):
        doc = {
            "formula_id": self.formula_id,
            "noise_std": self.noise_std,
            "circles": [
                {"lat": c.lat, "lon": c.lon, "radius_km": c.radius_km}
                for c in self.circles
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)

    @staticmethod
    def from_json(path):
        with open(path) as fh:
            doc = json.load(fh)
        return PlantedTruth(
            circles=tuple(Circle(c["lat"], c["lon"], c["radius_km"]) for c in doc["circles"]),
            formula_id=doc["formula_id"],
            noise_std=doc["noise_std"],
        )


@dataclass(frozen=True)
class GeneratorConfig:
    rows: int = 32
    cols: int = 32
    n_days: int = 400
    years: tuple = (2003, 2004, 2005, 2006)
    n_vars: int = 3
    lat0: float = 30.0
    lon0: float = 70.0
    dlat: float = 0.3
    dlon: float = 0.35
    smoothing: int = 5  # box filter side S
    seasonal_amplitude: float = 0.3
    noise_std: float = 0.0
    noise_relative: bool = False  # if True, noise_std scales std of the clean signal
    formula_id: str = "cross_term"
    circles: tuple | None = None  # default: one per variable at fixed fractions

    def grid(self) -> GeoGrid:
        return GeoGrid(self.rows, self.cols, self.lat0, self.lon0, self.dlat, self.dlon)


_DEFAULT_CENTER_FRACTIONS = [(0.30, 0.30), (0.65, 0.60), (0.40, 0.75)]


def default_circles(config: GeneratorConfig) -> tuple:
    """One planted circle per variable at fixed grid fractions.

    Radius is ~15% of the grid diagonal, so circles cover a handful of
    cells without spanning the region.
    """
    grid = config.grid()
    diag = haversine_km(grid.lat0, grid.lon0, grid.lat_max, grid.lon_max)
    radius = min(0.15 * diag, 1000.0)
    circles = []
    for v in range(config.n_vars):
        fy, fx = _DEFAULT_CENTER_FRACTIONS[v % len(_DEFAULT_CENTER_FRACTIONS)]
        lat = grid.lat0 + fy * (grid.rows - 1) * grid.dlat
        lon = grid.lon0 + fx * (grid.cols - 1) * grid.dlon
        circles.append(Circle(lat, lon, radius))
    return tuple(circles)


def _check_circle_in_grid(circle: Circle, grid: GeoGrid):
    in_bbox = (
        grid.lat0 <= circle.lat <= grid.lat_max and grid.lon0 <= circle.lon <= grid.lon_max
    )
    if not in_bbox:
        latlons = grid.cell_latlons()
        d = haversine_km(latlons[:, 0], latlons[:, 1], circle.lat, circle.lon)
        if np.min(d) > circle.radius_km:
            raise InvalidConfigError(
                f"planted circle at ({circle.lat}, {circle.lon}) lies entirely outside the grid"
            )


def generate_synthetic(config: GeneratorConfig, seed: int):
    """Deterministically generate (RasterSeries, ResponseSeries, PlantedTruth)."""
    if config.formula_id not in FORMULAS:
        raise InvalidConfigError(f"unknown formula_id {config.formula_id!r}")
    if len(config.years) < 1:
        raise InvalidConfigError("need at least one year")
    grid = config.grid()
    circles = config.circles if config.circles is not None else default_circles(config)
    for c in circles:
        _check_circle_in_grid(c, grid)

    rng = np.random.default_rng(seed)
    t = np.arange(config.n_days)
    period = config.n_days / len(config.years)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=config.n_vars)
    values = np.empty((config.n_days, config.rows, config.cols, config.n_vars))
    for v in range(config.n_vars):
        noise = rng.standard_normal((config.n_days, config.rows, config.cols))
        smooth = uniform_filter(
            noise, size=(1, config.smoothing, config.smoothing), mode="nearest"
        )
        seasonal = config.seasonal_amplitude * np.sin(2.0 * np.pi * t / period + phases[v])
        values[:, :, :, v] = smooth + seasonal[:, None, None]

    # planted aggregates: raw (unstandardized) within-circle means, circle k <-> var k
    A = np.empty((config.n_days, len(circles)))
    for k, c in enumerate(circles):
        mask = circle_members(c, grid)
        A[:, k] = values[:, mask.rows, mask.cols, k % config.n_vars].mean(axis=1)

    signal = FORMULAS[config.formula_id](A)
    sigma = config.noise_std * (float(signal.std()) if config.noise_relative else 1.0)
    response = signal + (rng.normal(0.0, sigma, config.n_days) if sigma > 0 else 0.0)

    chunks = np.array_split(np.arange(config.n_days), len(config.years))
    day_year = np.empty(config.n_days, dtype=np.int64)
    for year, idx in zip(config.years, chunks):
        day_year[idx] = year

    raster = RasterSeries(grid=grid, values=values, day_year=day_year)
    resp = ResponseSeries(values=response, day_year=day_year.copy())
    truth = PlantedTruth(circles=tuple(circles), formula_id=config.formula_id, noise_std=sigma)
    return raster, resp, truth


def config_from_dict(doc: dict) -> GeneratorConfig:
    """Build a GeneratorConfig from a JSON-style dict, validating keys."""
    known = set(GeneratorConfig.__dataclass_fields__)
    extra = set(doc) - known
    if extra:
        raise InvalidConfigError(f"unknown generator config keys: {sorted(extra)}")
    doc = dict(doc)
    if "years" in doc:
        doc["years"] = tuple(doc["years"])
    if doc.get("circles") is not None:
        doc["circles"] = tuple(
            Circle(c["lat"], c["lon"], c["radius_km"]) for c in doc["circles"]
        )
    try:
        return GeneratorConfig(**doc)
    except TypeError as exc:
        raise InvalidConfigError(str(exc)) from exc
