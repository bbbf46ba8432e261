"""Automatic bandwidth selection for the CMP dak estimator.

``select_h_kl`` minimizes the larger of the two Kullback-Leibler divergences
from the CMP estimate to the moment-matched Poisson and negative binomial
fits.  ``select_h_cv`` maximizes the leave-one-out log predictive
probability of the observations.  Both use :func:`search_1d`: a geometric
pre-scan followed by golden-section refinement on ``log h``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy import stats
from scipy.special import xlogy

from .cmp_dist import DEFAULT_SERIES, H_FLOOR, SeriesConfig
from .errors import DomainError, InsufficientDataError
from .estimators import (
    DEFAULT_SUPPORT,
    CountSample,
    PmfEstimate,
    SupportRule,
    cmp_kernel_rows,
    fit_cmp_dak,
)

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
REFERENCE_QUANTILE = 1.0 - 1e-12


class Method(str, enum.Enum):
    KL = "kl"
    CV = "cv"
    FIXED = "fixed"


@dataclass(frozen=True)
class SearchConfig:
    h_floor: float = H_FLOOR
    h_ceil: float = 20.0
    n_prescan: int = 25
    rel_tol: float = 1e-3
    series: SeriesConfig = DEFAULT_SERIES
    support: SupportRule = DEFAULT_SUPPORT

    def __post_init__(self):
        if not 0 < self.h_floor < self.h_ceil:
            raise DomainError("need 0 < h_floor < h_ceil")
        if self.n_prescan < 3:
            raise DomainError("n_prescan must be at least 3")
        if not self.rel_tol > 0:
            raise DomainError("rel_tol must be positive")

    def prescan_grid(self) -> np.ndarray:
        return np.geomspace(self.h_floor, self.h_ceil, self.n_prescan)


DEFAULT_SEARCH = SearchConfig()


@dataclass(frozen=True)
class ReferenceFits:
    poisson_lambda: float
    nb_mu: float | None = None
    nb_r: float | None = None


@dataclass(frozen=True)
class BandwidthResult:
    h: float
    method: Method
    objective_value: float
    trace: list = field(default_factory=list)
    reference_fits: ReferenceFits | None = None
    degenerate: bool = False


class Reference(Protocol):
    def logpmf(self, x: np.ndarray) -> np.ndarray: ...

    def upper_quantile(self, level: float) -> int: ...


@dataclass(frozen=True)
class PoissonReference:
    lam: float

    def logpmf(self, x):
        x = np.asarray(x)
        if self.lam == 0:
            return np.where(x == 0, 0.0, -np.inf)
        return stats.poisson.logpmf(x, self.lam)

    def upper_quantile(self, level: float) -> int:
        return 0 if self.lam == 0 else int(stats.poisson.ppf(level, self.lam))


@dataclass(frozen=True)
class NegBinomialReference:
    """Negative binomial with mean ``mu`` and variance ``mu + mu**2 / r``."""

    mu: float
    r: float

    def _p(self):
        return self.r / (self.r + self.mu)

    def logpmf(self, x):
        return stats.nbinom.logpmf(np.asarray(x), self.r, self._p())

    def upper_quantile(self, level: float) -> int:
        return int(stats.nbinom.ppf(level, self.r, self._p()))


def fit_reference_poisson(sample: CountSample) -> float:
    return sample.mean


def fit_reference_nb(sample: CountSample) -> tuple[float, float] | None:
    """Method-of-moments ``(mu, r)``, or None without overdispersion."""
    xbar, s2 = sample.mean, sample.variance
    if xbar == 0 or s2 <= xbar:
        return None
    return xbar, xbar**2 / (s2 - xbar)


def kl_divergence(p: PmfEstimate, q, support_cap: int | None = None) -> float:
    """``KL(p || q)`` in nats, summed over ``0..support_cap``.

    ``q`` needs ``logpmf``; if it also has ``upper_quantile`` the default cap
    covers its ``1 - 1e-12`` quantile.  Returns ``inf`` when ``p`` has mass
    where ``q`` has none.
    """
    if support_cap is None:
        support_cap = p.x_max
        if hasattr(q, "upper_quantile"):
            support_cap = max(support_cap, q.upper_quantile(REFERENCE_QUANTILE))
    x = np.arange(support_cap + 1)
    px = p.pmf(x)
    logq = np.asarray(q.logpmf(x), dtype=float)
    pos = px > 0
    if np.any(np.isneginf(logq[pos])):
        return math.inf
    terms = xlogy(px[pos], px[pos]) - px[pos] * logq[pos]
    return max(float(math.fsum(terms)), 0.0)


def references_for(sample: CountSample) -> tuple[ReferenceFits, list]:
    lam = fit_reference_poisson(sample)
    refs = [PoissonReference(lam)]
    nb = fit_reference_nb(sample)
    if nb is None:
        return ReferenceFits(lam), refs
    refs.append(NegBinomialReference(*nb))
    return ReferenceFits(lam, nb[0], nb[1]), refs


def minimax_kl(estimate: PmfEstimate, refs) -> float:
    return max(kl_divergence(estimate, q) for q in refs)


def search_1d(
    objective: Callable[[float], float], lo: float, hi: float, n_prescan: int, rel_tol: float
) -> tuple[float, float, list]:
    """Minimize ``objective`` over ``[lo, hi]``.

    A geometric pre-scan of ``n_prescan`` points locates the best cell, then
    golden-section search on ``log h`` shrinks the neighbouring interval to
    relative width ``rel_tol``.  The best point ever evaluated is returned,
    ties going to the smaller ``h``.  NaN objectives count as ``+inf``.
    """
    trace = []

    def f(h):
        v = objective(h)
        if math.isnan(v):
            v = math.inf
        trace.append((h, v))
        return v

    grid = np.geomspace(lo, hi, n_prescan)
    vals = [f(float(h)) for h in grid]
    i = int(np.argmin(vals))
    a = math.log(grid[max(i - 1, 0)])
    b = math.log(grid[min(i + 1, n_prescan - 1)])
    if math.isfinite(vals[i]):
        c = b - _INV_PHI * (b - a)
        d = a + _INV_PHI * (b - a)
        fc, fd = f(math.exp(c)), f(math.exp(d))
        while b - a > math.log1p(rel_tol):
            if fc <= fd:
                b, d, fd = d, c, fc
                c = b - _INV_PHI * (b - a)
                fc = f(math.exp(c))
            else:
                a, c, fc = c, d, fd
                d = a + _INV_PHI * (b - a)
                fd = f(math.exp(d))
    best_h, best_v = min(trace, key=lambda hv: (hv[1], hv[0]))
    return best_h, best_v, trace


def kl_objective(sample: CountSample, cfg: SearchConfig = DEFAULT_SEARCH):
    _, refs = references_for(sample)

    def objective(h: float) -> float:
        return minimax_kl(fit_cmp_dak(sample, h, cfg.series, cfg.support), refs)

    return objective


def select_h_kl(sample: CountSample, cfg: SearchConfig = DEFAULT_SEARCH) -> BandwidthResult:
    fits, _ = references_for(sample)
    h, v, trace = search_1d(
        kl_objective(sample, cfg), cfg.h_floor, cfg.h_ceil, cfg.n_prescan, cfg.rel_tol
    )
    return BandwidthResult(h, Method.KL, v, trace, fits)


def select_h_kl_for(
    sample: CountSample,
    fit: Callable[[float], PmfEstimate],
    lo: float,
    hi: float,
    cfg: SearchConfig = DEFAULT_SEARCH,
) -> BandwidthResult:
    """Apply the minimax-KL rule to an arbitrary estimator family ``fit(h)``."""
    fits, refs = references_for(sample)
    h, v, trace = search_1d(
        lambda h: minimax_kl(fit(h), refs), lo, hi, cfg.n_prescan, cfg.rel_tol
    )
    return BandwidthResult(h, Method.KL, v, trace, fits)


def loo_terms(sample: CountSample, h: float, cfg: SeriesConfig = DEFAULT_SERIES) -> np.ndarray:
    """Leave-one-out predictive probabilities, one per distinct value.

    Uses ``f^(-j)(X_j) = (n f(X_j) - C(X_j; X_j, 1/h)) / (n - 1)``.
    """
    n = sample.n
    if n < 2:
        raise InsufficientDataError("leave-one-out needs at least two observations")
    u = sample.unique_values
    rows = cmp_kernel_rows(u, h, cfg)
    # mat[i, j] = C(u_j; u_i, 1/h)
    mat = np.array([np.where(u < r.size, r[np.minimum(u, r.size - 1)], 0.0) for r in rows])
    full = sample.counts @ mat
    self_term = np.diag(mat)
    return np.clip((full - self_term) / (n - 1), 0.0, None)


def loo_log_likelihood(sample: CountSample, h: float, cfg: SeriesConfig = DEFAULT_SERIES) -> float:
    p = loo_terms(sample, h, cfg)
    if np.any(p <= 0):
        return -math.inf
    return float(math.fsum((sample.counts * np.log(p)).tolist()))


def select_h_cv(sample: CountSample, cfg: SearchConfig = DEFAULT_SEARCH) -> BandwidthResult:
    if sample.n < 2:
        raise InsufficientDataError("cross-validation needs at least two observations")
    h, v, trace = search_1d(
        lambda h: -loo_log_likelihood(sample, h, cfg.series),
        cfg.h_floor,
        cfg.h_ceil,
        cfg.n_prescan,
        cfg.rel_tol,
    )
    trace = [(th, -tv) for th, tv in trace]
    return BandwidthResult(h, Method.CV, -v, trace, None, degenerate=math.isinf(v))


def fixed_bandwidth(h: float) -> BandwidthResult:
    if not (h >= 0 and math.isfinite(h)):
        raise DomainError(f"bandwidth must be finite and >= 0, got {h}")
    return BandwidthResult(float(h), Method.FIXED, math.nan, [], None)
