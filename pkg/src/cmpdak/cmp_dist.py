"""Mean-parametrized Conway-Maxwell-Poisson (CMP) kernels.

The CMP pmf is ``lambda**x / (x!)**nu / Z(lambda, nu)``.  In the mean
parametrization ``lambda`` is not a free parameter: it is the unique rate for
which the distribution has mean ``mu``.  All arithmetic is carried out in log
space; ``theta`` always denotes ``log(lambda)``.

Two code paths exist.  :func:`log_normalizing_constant` is a scalar sequential
log-sum-exp accumulation.  :func:`solve_block` solves a whole set of kernel
centres sharing one dispersion at once (vectorized safeguarded Newton on
``theta``) and is what the estimators use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConvergenceError, DomainError

NU_MIN = 0.02
NU_MAX = 1e4
H_FLOOR = 1e-4

_LAMBDA_FLOOR = 1e-12
_MAX_NEWTON = 200


@dataclass(frozen=True)
class SeriesConfig:
    """Truncation and tolerance settings for CMP series evaluation."""

    rel_term_floor: float = math.exp(-36.0)
    max_terms: int = 100_000
    mean_tol: float = 1e-8

    def __post_init__(self):
        if not (self.rel_term_floor > 0 and self.mean_tol > 0):
            raise DomainError("rel_term_floor and mean_tol must be strictly positive")
        if self.rel_term_floor >= 1:
            raise DomainError("rel_term_floor must be below 1")
        if self.max_terms < 100:
            raise DomainError("max_terms must be at least 100")

    @property
    def log_gap(self) -> float:
        """Nats below the running log-sum at which terms are dropped."""
        return -math.log(self.rel_term_floor)


DEFAULT_SERIES = SeriesConfig()


@dataclass(frozen=True)
class CmpKernel:
    """A solved CMP distribution with mean ``mu`` and dispersion ``nu``.

    ``dirac`` kernels put all their mass on ``center``; they stand in for the
    ``nu -> infinity`` limit.  The rate is held as ``log_lam`` because
    ``lambda`` itself overflows for large ``nu``.
    """

    mu: float
    nu: float
    log_lam: float
    log_z: float
    truncation_point: int
    dirac: bool = False
    center: int = field(default=-1)

    @property
    def lam(self) -> float:
        return _safe_exp(self.log_lam)

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.truncation_point + 1)

    def log_pmf(self, x) -> np.ndarray:
        x = np.asarray(x)
        if self.dirac or self.log_lam == -math.inf:
            c = self.center if self.dirac else 0
            return np.where(x == c, 0.0, -np.inf)
        xf = x.astype(float)
        out = xf * self.log_lam - self.nu * gammaln(xf + 1.0) - self.log_z
        return np.where((x >= 0) & (x <= self.truncation_point), out, -np.inf)

    def pmf(self, x) -> np.ndarray:
        return np.exp(self.log_pmf(x))


def _safe_exp(v: float) -> float:
    try:
        return math.exp(v)
    except OverflowError:
        return math.inf


def _check_finite(**kwargs):
    for name, value in kwargs.items():
        if not math.isfinite(value):
            raise DomainError(f"{name} must be finite, got {value!r}")


def log_normalizing_constant(lam: float, nu: float, cfg: SeriesConfig = DEFAULT_SERIES):
    """Return ``(log Z(lam, nu), truncation_point)``.

    Terms are accumulated sequentially with a running log-sum-exp.  The series
    is cut once it is past its mode and a geometric bound on everything that
    remains lies ``cfg.log_gap`` nats below the running sum.
    """
    _check_finite(lam=lam, nu=nu)
    if lam < 0 or nu <= 0:
        raise DomainError(f"need lam >= 0 and nu > 0, got lam={lam}, nu={nu}")
    if lam == 0:
        return 0.0, 0
    theta = math.log(lam)
    gap = cfg.log_gap
    acc = 0.0
    for x in range(1, cfg.max_terms):
        term = x * theta - nu * math.lgamma(x + 1.0)
        acc = max(acc, term) + math.log1p(math.exp(-abs(acc - term)))
        # ratio of the next term to this one; decreasing in x
        log_ratio = theta - nu * math.log(x + 1.0)
        if log_ratio < 0:
            tail_bound = term + log_ratio - math.log(-math.expm1(log_ratio))
            if tail_bound < acc - gap:
                return acc, x
    raise ConvergenceError(
        f"CMP normalizing series did not converge within {cfg.max_terms} terms "
        f"(lambda={lam}, nu={nu})"
    )


class _Grid:
    """Shared x-grid with cached log-factorials, grown on demand."""

    def __init__(self, length: int, max_terms: int):
        self.max_terms = max_terms
        self._set(min(max(length, 16), max_terms))

    def _set(self, length: int):
        self.x = np.arange(length, dtype=float)
        self.lgam = gammaln(self.x + 1.0)

    def __len__(self):
        return self.x.size

    def grow(self, theta: np.ndarray, nu: float, gap: float) -> bool:
        """Ensure every row's series is resolved on the grid; True if grown."""
        grown = False
        while True:
            last = len(self) - 1
            log_ratio = theta - nu * math.log(last + 1.0)
            ok = log_ratio < 0
            if ok.all():
                t_last = last * theta - nu * self.lgam[last]
                # the row maximum sits at the mode, floor(exp(theta / nu))
                mode = np.minimum(np.floor(np.exp(np.minimum(theta / nu, 700.0))), last)
                t_mode = mode * theta - nu * gammaln(mode + 1.0)
                with np.errstate(over="ignore"):
                    bound = t_last + log_ratio - np.log(-np.expm1(log_ratio))
                ok = bound < t_mode - gap - 1.0
                if ok.all():
                    return grown
            if len(self) >= self.max_terms:
                raise ConvergenceError(
                    f"CMP series needs more than {self.max_terms} terms (nu={nu}, "
                    f"lambda up to {math.exp(float(np.max(theta)))})"
                )
            self._set(min(2 * len(self), self.max_terms))
            grown = True


def _initial_length(mu_max: float, nu: float) -> int:
    spread = math.sqrt((mu_max + 1.0) / nu)
    return int(mu_max + 20.0 + 12.0 * spread) + 1


def _moments(theta, nu, grid):
    t = theta[:, None] * grid.x[None, :] - nu * grid.lgam[None, :]
    log_z = logsumexp(t, axis=1)
    p = np.exp(t - log_z[:, None])
    mean = p @ grid.x
    var = np.einsum("ij,ij->i", p, (grid.x[None, :] - mean[:, None]) ** 2)
    return mean, var


@dataclass(frozen=True)
class SolvedBlock:
    """Kernels for several centres sharing one dispersion ``nu``.

    Rows with ``mu == 0`` have ``theta = -inf`` and all mass at 0.
    """

    mu: np.ndarray
    nu: float
    theta: np.ndarray
    log_z: np.ndarray
    truncation_point: np.ndarray

    def log_pmf_matrix(self, length: int | None = None) -> np.ndarray:
        """Log pmfs on ``0..length-1``; entries past each truncation point are -inf."""
        if length is None:
            length = int(self.truncation_point.max()) + 1 if self.mu.size else 1
        x = np.arange(length, dtype=float)
        lgam = gammaln(x + 1.0)
        pos = np.isfinite(self.theta)
        th = np.where(pos, self.theta, 0.0)
        out = th[:, None] * x[None, :] - self.nu * lgam[None, :] - self.log_z[:, None]
        out[~pos, :] = -np.inf
        out[~pos, 0] = 0.0
        out[x[None, :] > self.truncation_point[:, None]] = -np.inf
        return out

    def pmf_matrix(self, length: int | None = None) -> np.ndarray:
        return np.exp(self.log_pmf_matrix(length))


def solve_block(mu, nu: float, cfg: SeriesConfig = DEFAULT_SERIES) -> SolvedBlock:
    """Solve ``lambda(mu_i, nu)`` for every ``mu_i`` in ``mu`` at once.

    The search runs on ``theta = log(lambda)``, for which the CMP mean is
    strictly increasing with derivative equal to the variance.  A bracket
    ``[lo, hi]`` with ``mean(lo) < mu < mean(hi)`` is established first and
    every Newton step falling outside it is replaced by bisection.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    _check_finite(nu=nu)
    if nu <= 0:
        raise DomainError(f"nu must be positive, got {nu}")
    if mu.size and (not np.all(np.isfinite(mu)) or mu.min() < 0):
        raise DomainError("every mu must be finite and non-negative")

    theta_out = np.full(mu.shape, -np.inf)
    log_z_out = np.zeros(mu.shape)
    trunc_out = np.zeros(mu.shape, dtype=np.int64)
    pos = mu > 0
    if not pos.any():
        return SolvedBlock(mu, nu, theta_out, log_z_out, trunc_out)

    m = mu[pos]
    tight = 1e-3 * cfg.mean_tol * np.maximum(1.0, m)
    loose = cfg.mean_tol * np.maximum(1.0, m)
    gap = cfg.log_gap

    base = m + (nu - 1.0) / (2.0 * nu)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(base > 0, nu * np.log(base), -np.inf)
    theta = np.maximum(theta, math.log(_LAMBDA_FLOOR))
    lo = np.minimum(theta, math.log(_LAMBDA_FLOOR)) - 1.0
    hi = nu * np.log(m + 1.0 / nu + 2.0)

    grid = _Grid(_initial_length(float(m.max()) + 1.0 / nu, nu), cfg.max_terms)

    # establish the bracket
    for _ in range(100):
        grid.grow(hi, nu, gap)
        mean_lo, _ = _moments(lo, nu, grid)
        mean_hi, _ = _moments(hi, nu, grid)
        bad_lo = mean_lo >= m
        bad_hi = mean_hi <= m
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, lo - 20.0, lo)
        hi = np.where(bad_hi, hi + nu, hi)
    else:
        raise ConvergenceError(f"could not bracket lambda for nu={nu}")

    theta = np.clip(theta, lo, hi)
    done = np.zeros(m.shape, dtype=bool)
    for _ in range(_MAX_NEWTON):
        act = ~done
        th = theta[act]
        grid.grow(th, nu, gap)
        mean, var = _moments(th, nu, grid)
        err = mean - m[act]
        conv = np.abs(err) <= tight[act]
        lo_a = np.where(err < 0, th, lo[act])
        hi_a = np.where(err > 0, th, hi[act])
        collapsed = (hi_a - lo_a) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(th))
        if np.any(collapsed & ~conv & (np.abs(err) > loose[act])):
            bad = np.flatnonzero(act)[collapsed & ~conv & (np.abs(err) > loose[act])][0]
            raise ConvergenceError(
                f"lambda solve stalled for mu={mu[pos][bad]}, nu={nu}"
            )
        conv |= collapsed
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            step = th - err / var
        inside = np.isfinite(step) & (step > lo_a) & (step < hi_a)
        new = np.where(inside, step, 0.5 * (lo_a + hi_a))
        theta[act] = np.where(conv, th, new)
        lo[act] = lo_a
        hi[act] = hi_a
        done[act] = conv
        if done.all():
            break
    else:
        raise ConvergenceError(f"lambda solve did not converge for nu={nu}")

    grid.grow(theta, nu, gap)
    t = theta[:, None] * grid.x[None, :] - nu * grid.lgam[None, :]
    log_z_full = logsumexp(t, axis=1)
    log_ratio = theta[:, None] - nu * np.log(grid.x[None, :] + 1.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        bound = t + log_ratio - np.log(-np.expm1(log_ratio))
    cut = (log_ratio < 0) & (bound < log_z_full[:, None] - gap)
    trunc = np.argmax(cut, axis=1)
    t[grid.x[None, :] > trunc[:, None]] = -np.inf
    theta_out[pos] = theta
    log_z_out[pos] = logsumexp(t, axis=1)
    trunc_out[pos] = trunc
    return SolvedBlock(mu, nu, theta_out, log_z_out, trunc_out)


def solve_log_lambda(mu: float, nu: float, cfg: SeriesConfig = DEFAULT_SERIES) -> float:
    """``log(lambda)`` giving the CMP(lambda, nu) distribution mean ``mu``."""
    _check_finite(mu=mu, nu=nu)
    if mu < 0 or nu <= 0:
        raise DomainError(f"need mu >= 0 and nu > 0, got mu={mu}, nu={nu}")
    if mu == 0:
        return -math.inf
    return float(solve_block([mu], nu, cfg).theta[0])


def solve_lambda(mu: float, nu: float, cfg: SeriesConfig = DEFAULT_SERIES) -> float:
    """Rate ``lambda`` for mean ``mu``; ``inf`` if it overflows a double."""
    return _safe_exp(solve_log_lambda(mu, nu, cfg))


def nu_from_bandwidth(h: float) -> float:
    """Dispersion ``1/h`` clamped to ``[NU_MIN, NU_MAX]``."""
    if h <= 0:
        return NU_MAX
    return min(max(1.0 / h, NU_MIN), NU_MAX)


def is_dirac_bandwidth(h: float) -> bool:
    return h <= H_FLOOR


def dirac_kernel(mu: float) -> CmpKernel:
    center = int(round(mu))  # round-half-to-even
    return CmpKernel(
        mu=float(mu),
        nu=math.inf,
        log_lam=-math.inf if center == 0 else math.inf,
        log_z=0.0,
        truncation_point=center,
        dirac=True,
        center=center,
    )


def make_kernel(mu: float, h: float, cfg: SeriesConfig = DEFAULT_SERIES) -> CmpKernel:
    """Kernel with mean ``mu`` and bandwidth ``h`` (dispersion ``1/h``).

    Bandwidths at or below ``H_FLOOR`` give an exact Dirac kernel at
    ``round(mu)``.
    """
    _check_finite(mu=mu, h=h)
    if mu < 0:
        raise DomainError(f"mu must be non-negative, got {mu}")
    if h < 0:
        raise DomainError(f"bandwidth must be non-negative, got {h}")
    if is_dirac_bandwidth(h):
        return dirac_kernel(mu)
    nu = nu_from_bandwidth(h)
    if mu == 0:
        return CmpKernel(mu=0.0, nu=nu, log_lam=-math.inf, log_z=0.0, truncation_point=0, center=0)
    block = solve_block([mu], nu, cfg)
    return CmpKernel(
        mu=float(mu),
        nu=nu,
        log_lam=float(block.theta[0]),
        log_z=float(block.log_z[0]),
        truncation_point=int(block.truncation_point[0]),
    )


def cmp_log_pmf(k: CmpKernel, x: int) -> float:
    if x < 0:
        raise DomainError(f"x must be non-negative, got {x}")
    return float(k.log_pmf(np.array([x]))[0])


def cmp_moments(k: CmpKernel) -> tuple[float, float]:
    """Mean and variance by direct summation over the truncated support."""
    if k.dirac:
        return float(k.center), 0.0
    x = k.support.astype(float)
    p = k.pmf(k.support)
    mean = float(p @ x)
    var = float(p @ (x - mean) ** 2)
    return mean, var
