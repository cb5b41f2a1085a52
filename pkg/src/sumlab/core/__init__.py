"""Shared probability kernel and value types."""

from .kernels import (
    DEFAULT_TAIL_EPS,
    SeriesValue,
    expect_truncated,
    log_mixture_moments,
    mixture_moment,
    nb_logpmf,
    nb_pmf,
    nb_tail_ratio,
    normal_quantile,
)
from .report import report_from_json, report_to_dict, report_to_json
from .rng import RngContract, as_generator
from .types import (
    Diagnostics,
    DiscreteMixingDistribution,
    EstimateReport,
    FrequencyOfFrequencies,
    GammaShapeScale,
    geometric_grid,
)

__all__ = [
    "DEFAULT_TAIL_EPS",
    "Diagnostics",
    "DiscreteMixingDistribution",
    "EstimateReport",
    "FrequencyOfFrequencies",
    "GammaShapeScale",
    "RngContract",
    "SeriesValue",
    "as_generator",
    "expect_truncated",
    "geometric_grid",
    "log_mixture_moments",
    "mixture_moment",
    "nb_logpmf",
    "nb_pmf",
    "nb_tail_ratio",
    "normal_quantile",
    "report_from_json",
    "report_to_dict",
    "report_to_json",
]
