"""Spatial decay curves and treatment-effect boundaries.

Parametric exponential decay versus local polynomial regression, plus the
plumbing needed to get there from large geolocated outcome files.
"""

from .boundary import (
    BoundaryEstimate,
    SpatialBoundaryEstimator,
    check_monotonicity,
    estimate_boundary,
    partial_id_bounds,
)
from .errors import (
    ConfigurationError,
    DecayScopeError,
    DegenerateInputError,
    InputValidationError,
    SchemaError,
    SingularFitError,
)
from .geo import GeoPoint, SourceSet, haversine, haversine_km, nearest_source_km
from .ingest import DistancedSample, FilterConfig, stream_ingest, summarize
from .kernels import (
    Bandwidth,
    DecayCurve,
    KernelSpec,
    LocalPolynomialRegressor,
    cv_bandwidth,
    fit_decay_curve,
    get_kernel,
    local_poly_fit,
    silverman_bandwidth,
)
from .inference import (
    BootstrapConfig,
    HacConfig,
    PlugInVariance,
    SpecTestResult,
    bootstrap_boundary_ci,
    hac_for_fit,
    plug_in_ci,
    spatial_hac_se,
    specification_test,
)
from .metrics import BinComparison, ComparisonReport, compare_methods, period_summary
from .parametric import (
    ExponentialDecayRegressor,
    ExponentialFit,
    fit_exponential,
    parametric_boundary,
    predict,
)

from .synth import (
    Exponential,
    PiecewiseTable,
    QuadraticExponent,
    SyntheticSpec,
    TwoRegime,
    generate,
    generate_spatial,
)

__version__ = "0.1.0"

__all__ = [
    "Bandwidth",
    "BinComparison",
    "BootstrapConfig",
    "BoundaryEstimate",
    "ComparisonReport",
    "ConfigurationError",
    "DecayCurve",
    "DecayScopeError",
    "DegenerateInputError",
    "DistancedSample",
    "Exponential",
    "ExponentialDecayRegressor",
    "ExponentialFit",
    "FilterConfig",
    "GeoPoint",
    "HacConfig",
    "InputValidationError",
    "KernelSpec",
    "LocalPolynomialRegressor",
    "PiecewiseTable",
    "PlugInVariance",
    "QuadraticExponent",
    "SchemaError",
    "SingularFitError",
    "SourceSet",
    "SpatialBoundaryEstimator",
    "SpecTestResult",
    "SyntheticSpec",
    "TwoRegime",
    "bootstrap_boundary_ci",
    "check_monotonicity",
    "compare_methods",
    "cv_bandwidth",
    "estimate_boundary",
    "fit_decay_curve",
    "fit_exponential",
    "generate",
    "generate_spatial",
    "get_kernel",
    "hac_for_fit",
    "haversine",
    "haversine_km",
    "local_poly_fit",
    "nearest_source_km",
    "parametric_boundary",
    "partial_id_bounds",
    "period_summary",
    "plug_in_ci",
    "predict",
    "silverman_bandwidth",
    "spatial_hac_se",
    "specification_test",
    "stream_ingest",
    "summarize",
]
