"""Second-order discrete kernel smoothing of count data with mean-parametrized
Conway-Maxwell-Poisson kernels."""

__version__ = "0.1.0"

from .bandwidth import BandwidthResult, SearchConfig, select_h_cv, select_h_kl  # noqa: E402
from .cmp_dist import CmpKernel, SeriesConfig, make_kernel, solve_lambda  # noqa: E402
from .estimators import (  # noqa: E402
    CountSample,
    PmfEstimate,
    SupportRule,
    TriangularKernelSpec,
    fit_binomial_dak,
    fit_cmp_dak,
    fit_histogram,
    fit_triangular_dak,
)

__all__ = [
    "BandwidthResult",
    "CmpKernel",
    "CountSample",
    "PmfEstimate",
    "SearchConfig",
    "SeriesConfig",
    "SupportRule",
    "TriangularKernelSpec",
    "fit_binomial_dak",
    "fit_cmp_dak",
    "fit_histogram",
    "fit_triangular_dak",
    "make_kernel",
    "select_h_cv",
    "select_h_kl",
    "solve_lambda",
]
