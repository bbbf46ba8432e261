"""Accuracy metrics: integrated squared error and tail-probability error."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .estimators import PmfEstimate

TRUTH_QUANTILE = 1.0 - 1e-12


@dataclass(frozen=True)
class TailQuery:
    level: float
    threshold: int

    @classmethod
    def from_truth(cls, truth, level: float) -> "TailQuery":
        """Threshold is the smallest x whose true CDF reaches ``level``."""
        if not 0.0 < level < 1.0:
            raise DomainError(f"tail level must lie in (0, 1), got {level}")
        return cls(level, truth.upper_quantile(level))


@dataclass(frozen=True)
class RelativeErrorOutcome:
    value: float | None
    divergent: bool = False


def ise(estimate: PmfEstimate, truth, support_cap: int | None = None) -> float:
    """Sum of squared differences between the estimated and true pmfs."""
    if support_cap is None:
        support_cap = max(estimate.x_max, truth.upper_quantile(TRUTH_QUANTILE))
    x = np.arange(support_cap + 1)
    diff = estimate.pmf(x) - np.asarray(truth.pmf(x), dtype=float)
    return float(math.fsum((diff * diff).tolist()))


def tail_probability(estimate: PmfEstimate, threshold: int) -> float:
    """Estimated ``P(X > threshold)``, counting mass beyond ``x_max``."""
    if threshold < 0:
        raise DomainError(f"threshold must be non-negative, got {threshold}")
    upper = float(estimate.probs[threshold + 1 :].sum()) + estimate.tail_mass
    return min(max(upper, 0.0), 1.0)


def tail_relative_error(p_hat: float, p_true: float) -> RelativeErrorOutcome:
    """``|log10(p_hat / p_true)|``; a zero estimate is flagged divergent."""
    if not p_true > 0:
        raise DomainError(f"true tail probability must be positive, got {p_true}")
    if p_hat < 0:
        raise DomainError(f"estimated tail probability must be non-negative, got {p_hat}")
    if p_hat == 0:
        return RelativeErrorOutcome(None, True)
    return RelativeErrorOutcome(abs(math.log10(p_hat) - math.log10(p_true)))
