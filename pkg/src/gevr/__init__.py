"""Evolving circular spatial aggregations of raster time series for regional prediction."""

from .errors import (
    ConvergenceError,
    GevrError,
    InvalidConfigError,
    InvalidInputError,
    MissingCellError,
    RasterFormatError,
    UndefinedTestError,
)
from .raster import (
    FoldSpec,
    GeoGrid,
    RasterSeries,
    ResponseSeries,
    StandardizationParams,
    load_raster,
    load_response,
    make_folds,
    save_raster,
    save_response,
    standardize_apply,
    standardize_fit,
)
from .spatial import (
    AggFeature,
    Circle,
    FilterGrid,
    MembershipIndex,
    MembershipMask,
    aggregate,
    build_filter_grid,
    circle_members,
    fit_agg_feature,
    haversine_km,
    mutate_circle,
)
from .synthetic import GeneratorConfig, PlantedTruth, generate_synthetic

__version__ = "0.1.0"
