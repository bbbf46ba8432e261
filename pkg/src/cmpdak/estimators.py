"""Discrete associated kernel (dak) estimators of a probability mass function.

Four estimators share the :class:`PmfEstimate` output type:

* histogram (Dirac kernels),
* CMP dak, kernels centred at the observations with dispersion ``1/h``,
* symmetric triangular dak with range parameter ``a``,
* binomial dak (first-order baseline).
"""

from __future__ import annotations

import enum
import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import stats

from .cmp_dist import (
    DEFAULT_SERIES,
    SeriesConfig,
    is_dirac_bandwidth,
    nu_from_bandwidth,
    solve_block,
)
from .errors import DomainError


class EstimatorTag(str, enum.Enum):
    HISTOGRAM = "histogram"
    CMP = "cmp"
    TRIANGULAR = "triangular"
    BINOMIAL = "binomial"


@dataclass(frozen=True, eq=False)
class CountSample:
    """Observed non-negative integer counts with cached summary moments."""

    values: np.ndarray
    n: int = field(init=False)
    mean: float = field(init=False)
    variance: float = field(init=False)
    max_value: int = field(init=False)
    unique_values: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 1 or raw.size == 0:
            raise DomainError("a sample needs at least one observation")
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise DomainError("counts must be integers")
        elif raw.dtype.kind not in "iub":
            raise DomainError(f"counts must be integers, got dtype {raw.dtype}")
        vals = raw.astype(np.int64)
        if vals.min() < 0:
            raise DomainError("counts must be non-negative")
        vals.setflags(write=False)
        uniq, cnt = np.unique(vals, return_counts=True)
        set_ = object.__setattr__
        set_(self, "values", vals)
        set_(self, "n", int(vals.size))
        set_(self, "mean", math.fsum(vals.tolist()) / vals.size)
        # S^2 with denominator n - 1; a single observation has no spread
        if vals.size > 1:
            dev = [(v - self.mean) ** 2 for v in vals.tolist()]
            set_(self, "variance", math.fsum(dev) / (vals.size - 1))
        else:
            set_(self, "variance", 0.0)
        set_(self, "max_value", int(vals.max()))
        set_(self, "unique_values", uniq)
        set_(self, "counts", cnt)

    @classmethod
    def of(cls, values: Iterable[int]) -> "CountSample":
        return cls(np.asarray(list(values)))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()[:16]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        return isinstance(other, CountSample) and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PmfEstimate:
    """Estimated pmf on ``0..x_max`` plus the mass lying beyond ``x_max``."""

    probs: np.ndarray
    tail_mass: float
    estimator_tag: EstimatorTag
    bandwidth: float | None = None

    @property
    def x_max(self) -> int:
        return int(self.probs.size - 1)

    def pmf(self, x) -> np.ndarray:
        x = np.asarray(x)
        inside = (x >= 0) & (x <= self.x_max)
        return np.where(inside, self.probs[np.clip(x, 0, self.x_max)], 0.0)

    def logpmf(self, x) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.pmf(x))

    def cdf(self, x: int) -> float:
        if x < 0:
            return 0.0
        return float(self.probs[: x + 1].sum())

    def upper_quantile(self, level: float) -> int:
        """Smallest x whose cumulative mass reaches ``level`` (capped at x_max)."""
        cum = np.cumsum(self.probs)
        idx = int(np.searchsorted(cum, level, side="left"))
        return min(idx, self.x_max)

    def mean(self) -> float:
        return float(self.probs @ np.arange(self.probs.size))

    def total_mass(self) -> float:
        return float(self.probs.sum()) + self.tail_mass


@dataclass(frozen=True)
class SupportRule:
    """How far to extend a CMP estimate's support.

    With ``fixed_max`` unset, ``x_max`` is the smallest integer whose
    cumulative estimated mass reaches ``1 - tail_tol`` but never less than
    ``max_value + min_extra``.
    """

    tail_tol: float = 1e-13
    min_extra: int = 10
    fixed_max: int | None = None

    def __post_init__(self):
        if not 0 < self.tail_tol < 1:
            raise DomainError("tail_tol must lie in (0, 1)")
        if self.min_extra < 0:
            raise DomainError("min_extra must be non-negative")
        if self.fixed_max is not None and self.fixed_max < 0:
            raise DomainError("fixed_max must be non-negative")


DEFAULT_SUPPORT = SupportRule()


@dataclass(frozen=True)
class TriangularKernelSpec:
    a: int = 2
    h: float = 0.0

    def __post_init__(self):
        if int(self.a) != self.a or self.a < 1:
            raise DomainError(f"triangular range parameter a must be an integer >= 1, got {self.a}")
        if not (self.h >= 0 and math.isfinite(self.h)):
            raise DomainError(f"triangular bandwidth must be finite and >= 0, got {self.h}")


def fit_histogram(sample: CountSample) -> PmfEstimate:
    probs = np.bincount(sample.values, minlength=sample.max_value + 1) / sample.n
    return PmfEstimate(probs, 0.0, EstimatorTag.HISTOGRAM, None)


class _KernelCache:
    """LRU cache of CMP kernel rows keyed by ``(nu, centre, series config)``.

    Rows are pmfs on ``0..truncation_point``.  Cached arrays are read-only.
    """

    def __init__(self, maxsize: int = 8192):
        self.maxsize = maxsize
        self._rows: OrderedDict = OrderedDict()

    def clear(self):
        self._rows.clear()

    def rows(self, centers: np.ndarray, nu: float, cfg: SeriesConfig) -> list[np.ndarray]:
        keys = [(nu, int(c), cfg) for c in centers]
        missing = [i for i, k in enumerate(keys) if k not in self._rows]
        if missing:
            block = solve_block(centers[missing].astype(float), nu, cfg)
            mat = block.pmf_matrix()
            for j, i in enumerate(missing):
                row = mat[j, : int(block.truncation_point[j]) + 1].copy()
                row.setflags(write=False)
                self._rows[keys[i]] = row
        out = []
        for k in keys:
            self._rows.move_to_end(k)
            out.append(self._rows[k])
        while len(self._rows) > self.maxsize:
            self._rows.popitem(last=False)
        return out


kernel_cache = _KernelCache()


def cmp_kernel_rows(centers, h: float, cfg: SeriesConfig = DEFAULT_SERIES) -> list[np.ndarray]:
    """CMP kernel pmfs (each on ``0..truncation_point``) for integer centres."""
    centers = np.asarray(centers, dtype=np.int64)
    if is_dirac_bandwidth(h):
        rows = []
        for c in centers:
            row = np.zeros(int(c) + 1)
            row[-1] = 1.0
            rows.append(row)
        return rows
    return kernel_cache.rows(centers, nu_from_bandwidth(h), cfg)


def _choose_x_max(probs: np.ndarray, sample: CountSample, support: SupportRule) -> int:
    if support.fixed_max is not None:
        return support.fixed_max
    # accumulate from the right so the tail is resolved below the sum's roundoff
    tail = np.cumsum(probs[::-1])[::-1]
    beyond = np.append(tail[1:], 0.0)
    idx = int(np.argmax(beyond <= support.tail_tol))
    return max(idx, sample.max_value + support.min_extra)


def fit_cmp_dak(
    sample: CountSample,
    h: float,
    cfg: SeriesConfig = DEFAULT_SERIES,
    support: SupportRule = DEFAULT_SUPPORT,
) -> PmfEstimate:
    """CMP dak estimate: the multiplicity-weighted average of kernels ``C(.; X_i, 1/h)``."""
    if not (h >= 0 and math.isfinite(h)):
        raise DomainError(f"bandwidth must be finite and >= 0, got {h}")
    rows = cmp_kernel_rows(sample.unique_values, h, cfg)
    length = max(r.size for r in rows)
    acc = np.zeros(length)
    for w, r in zip(sample.counts, rows):
        acc[: r.size] += w * r
    acc /= sample.n
    x_max = _choose_x_max(acc, sample, support)
    if x_max + 1 > acc.size:
        probs = np.zeros(x_max + 1)
        probs[: acc.size] = acc
        tail = 0.0
    else:
        probs = acc[: x_max + 1].copy()
        tail = float(acc[x_max + 1 :].sum())
    return PmfEstimate(probs, tail, EstimatorTag.CMP, float(h))


def triangular_kernel_weights(spec: TriangularKernelSpec, x: int = 0) -> np.ndarray:
    """Normalized weights of the kernel centred at ``x`` over ``x-a..x+a``.

    ``0**h`` is taken as 0 for every ``h >= 0``, so ``h = 0`` gives a Dirac
    kernel.  The centre ``x`` only labels the support; the weights do not
    depend on it.
    """
    a = int(spec.a)
    d = np.abs(np.arange(-a, a + 1)).astype(float)
    powered = np.where(d == 0, 0.0, d**spec.h)
    w = (a + 1.0) ** spec.h - powered
    return w / w.sum()


def fit_triangular_dak(sample: CountSample, spec: TriangularKernelSpec) -> PmfEstimate:
    a = int(spec.a)
    w = triangular_kernel_weights(spec)
    # index i of `raw` corresponds to x = i - a
    raw = np.zeros(sample.max_value + 2 * a + 1)
    for v, c in zip(sample.unique_values, sample.counts):
        raw[v : v + 2 * a + 1] += c * w
    probs = raw[a:]
    probs = probs / probs.sum()
    return PmfEstimate(probs, 0.0, EstimatorTag.TRIANGULAR, float(spec.h))


def fit_binomial_dak(sample: CountSample, h: float) -> PmfEstimate:
    """Binomial dak: kernel at ``x`` is Binomial(x + 1, (x + h) / (x + 1))."""
    if not 0.0 <= h <= 1.0:
        raise DomainError(f"binomial bandwidth must lie in [0, 1], got {h}")
    probs = np.zeros(sample.max_value + 2)
    for v, c in zip(sample.unique_values, sample.counts):
        k = np.arange(v + 2)
        probs[: v + 2] += c * stats.binom.pmf(k, v + 1, (v + h) / (v + 1))
    probs /= sample.n
    return PmfEstimate(probs, 0.0, EstimatorTag.BINOMIAL, float(h))
