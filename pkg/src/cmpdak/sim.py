"""Target mixtures, seeded sampling and the Monte Carlo comparison harness."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .bandwidth import DEFAULT_SEARCH, SearchConfig, select_h_cv, select_h_kl, select_h_kl_for
from .errors import CmpdakError, DomainError
from .estimators import (
    CountSample,
    PmfEstimate,
    TriangularKernelSpec,
    fit_binomial_dak,
    fit_cmp_dak,
    fit_histogram,
    fit_triangular_dak,
)
from .metrics import TailQuery, ise, tail_probability, tail_relative_error

THREADS_ENV = "CMPDAK_THREADS"


class TargetSpecError(CmpdakError, ValueError):
    """Invalid target specification; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class Kind(str, enum.Enum):
    POISSON = "poisson"
    NEGATIVE_BINOMIAL = "negative_binomial"
    POINT_MASS = "point_mass"


_PARAMS = {
    Kind.POISSON: ("lam",),
    Kind.NEGATIVE_BINOMIAL: ("mu", "r"),
    Kind.POINT_MASS: ("value",),
}


@dataclass(frozen=True)
class Component:
    kind: Kind
    params: dict
    weight: float

    def _frozen(self):
        if self.kind is Kind.POISSON:
            return stats.poisson(self.params["lam"])
        if self.kind is Kind.NEGATIVE_BINOMIAL:
            mu, r = self.params["mu"], self.params["r"]
            return stats.nbinom(r, r / (r + mu))
        return None

    def pmf(self, x: np.ndarray) -> np.ndarray:
        if self.kind is Kind.POINT_MASS:
            return (x == self.params["value"]).astype(float)
        if self.kind is Kind.POISSON and self.params["lam"] == 0:
            return (x == 0).astype(float)
        return self._frozen().pmf(x)

    def ppf(self, u: np.ndarray) -> np.ndarray:
        if self.kind is Kind.POINT_MASS:
            return np.full(u.shape, self.params["value"], dtype=np.int64)
        if self.kind is Kind.POISSON and self.params["lam"] == 0:
            return np.zeros(u.shape, dtype=np.int64)
        return np.maximum(self._frozen().ppf(u), 0).astype(np.int64)

    def upper(self, level: float) -> int:
        return int(self.ppf(np.array([level]))[0])


@dataclass(frozen=True)
class TargetSpec:
    """A finite mixture of Poisson, negative binomial and point-mass pmfs."""

    name: str
    components: tuple

    def __post_init__(self):
        if not self.components:
            raise TargetSpecError("components", "at least one component is required")
        total = sum(c.weight for c in self.components)
        object.__setattr__(
            self,
            "components",
            tuple(Component(c.kind, dict(c.params), c.weight / total) for c in self.components),
        )

    @classmethod
    def from_dict(cls, data) -> "TargetSpec":
        if not isinstance(data, dict):
            raise TargetSpecError("$", "expected a JSON object")
        name = data.get("name")
        if not isinstance(name, str) or not name:
            raise TargetSpecError("name", "must be a non-empty string")
        comps = data.get("components")
        if not isinstance(comps, list) or not comps:
            raise TargetSpecError("components", "must be a non-empty list")
        out = []
        for i, c in enumerate(comps):
            where = f"components[{i}]"
            if not isinstance(c, dict):
                raise TargetSpecError(where, "expected an object")
            try:
                kind = Kind(c.get("kind"))
            except ValueError:
                choices = ", ".join(k.value for k in Kind)
                raise TargetSpecError(f"{where}.kind", f"must be one of {choices}") from None
            params = c.get("params")
            if not isinstance(params, dict):
                raise TargetSpecError(f"{where}.params", "expected an object")
            expected = _PARAMS[kind]
            extra = set(params) - set(expected)
            if extra:
                raise TargetSpecError(f"{where}.params", f"unexpected keys {sorted(extra)}")
            clean = {}
            for key in expected:
                v = params.get(key)
                p = f"{where}.params.{key}"
                if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                    raise TargetSpecError(p, "must be a finite number")
                if key == "r" and v <= 0:
                    raise TargetSpecError(p, "must be > 0")
                if v < 0:
                    raise TargetSpecError(p, "must be >= 0")
                if key == "value":
                    if int(v) != v:
                        raise TargetSpecError(p, "must be a non-negative integer")
                    v = int(v)
                clean[key] = v
            w = c.get("weight", 1.0)
            if isinstance(w, bool) or not isinstance(w, (int, float)) or not (w > 0 and math.isfinite(w)):
                raise TargetSpecError(f"{where}.weight", "must be a positive finite number")
            out.append(Component(kind, clean, float(w)))
        return cls(name, tuple(out))

    @classmethod
    def from_json(cls, text: str) -> "TargetSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise TargetSpecError("$", f"invalid JSON ({e})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "components": [
                {"kind": c.kind.value, "params": dict(c.params), "weight": c.weight}
                for c in self.components
            ],
        }

    def pmf(self, x) -> np.ndarray:
        x = np.asarray(x)
        out = np.zeros(x.shape)
        for c in self.components:
            out = out + c.weight * c.pmf(x)
        return out

    def cdf(self, x: int) -> float:
        if x < 0:
            return 0.0
        return float(math.fsum(self.pmf(np.arange(x + 1)).tolist()))

    def sf(self, x: int) -> float:
        """``P(X > x)``, summed directly over the upper tail."""
        hi = max(self.upper_quantile(1.0 - 1e-17), x) + 50
        return float(math.fsum(self.pmf(np.arange(x + 1, hi + 1)).tolist()))

    def upper_quantile(self, level: float) -> int:
        """Smallest x whose CDF reaches ``level``."""
        hi = max(c.upper(min(level, 1.0 - 1e-16)) for c in self.components) + 1
        cum = np.cumsum(self.pmf(np.arange(hi + 1)))
        idx = int(np.searchsorted(cum, level - 1e-15, side="left"))
        return min(idx, hi)


def target_pmf(spec: TargetSpec, x: int) -> float:
    return float(spec.pmf(np.array([x]))[0])


def sample_target(spec: TargetSpec, n: int, seed) -> CountSample:
    """Draw ``n`` counts: pick a component, then invert its CDF."""
    if n < 1:
        raise DomainError("sample size must be at least 1")
    rng = np.random.default_rng(seed)
    pick = rng.random(n)
    u = rng.random(n)
    weights = np.cumsum([c.weight for c in spec.components])
    which = np.minimum(np.searchsorted(weights, pick, side="right"), len(weights) - 1)
    out = np.zeros(n, dtype=np.int64)
    for i, c in enumerate(spec.components):
        mask = which == i
        if mask.any():
            out[mask] = c.ppf(u[mask])
    return CountSample(out)


def _poisson(lam):
    return Component(Kind.POISSON, {"lam": lam}, 1.0)


def _mix(name, parts):
    return TargetSpec(name, tuple(Component(c.kind, c.params, w) for w, c in parts))


# Illustrative mixtures covering the usual shapes of count data.  They are
# example targets, not reconstructions of any published set.  Their spreads
# put the histogram's expected ISE, (1 - sum f^2) / n, near 0.046 at n = 20.
BUILTIN_TARGETS = {
    t.name: t
    for t in (
        _mix("poisson_unimodal", [(1.0, _poisson(14.0))]),
        _mix("nb_overdispersed", [(1.0, Component(Kind.NEGATIVE_BINOMIAL, {"mu": 6.0, "r": 6.0}, 1.0))]),
        _mix("zero_inflated_poisson", [(0.1, Component(Kind.POINT_MASS, {"value": 0}, 1.0)), (0.9, _poisson(20.0))]),
        _mix("bimodal_poisson", [(0.5, _poisson(12.0)), (0.5, _poisson(40.0))]),
        _mix("bimodal_unequal", [(0.7, _poisson(8.0)), (0.3, _poisson(35.0))]),
        _mix("trimodal_poisson", [(1 / 3, _poisson(5.0)), (1 / 3, _poisson(20.0)), (1 / 3, _poisson(40.0))]),
    )
}

POINT_MASS_DEMO = TargetSpec("point_mass_7", (Component(Kind.POINT_MASS, {"value": 7}, 1.0),))


def load_target(ref: str) -> TargetSpec:
    """Target from a builtin name or a JSON file path."""
    if ref in BUILTIN_TARGETS:
        return BUILTIN_TARGETS[ref]
    with open(ref, encoding="utf-8") as fh:
        return TargetSpec.from_json(fh.read())


@dataclass(frozen=True)
class EstimatorSpec:
    """Estimator plus bandwidth rule, written ``kind[:rule[:value]]``.

    Rules: ``kl``, ``cv`` (CMP only), ``fixed:<h>`` and ``rate:<c>`` which
    uses ``h = c / sqrt(n)``.
    """

    kind: str
    rule: str | None = None
    value: float | None = None

    @classmethod
    def parse(cls, text: str) -> "EstimatorSpec":
        parts = text.strip().split(":")
        kind = parts[0]
        if kind not in ("histogram", "cmp", "triangular", "binomial"):
            raise DomainError(f"unknown estimator {kind!r} in {text!r}")
        if kind == "histogram":
            if len(parts) > 1:
                raise DomainError("histogram takes no bandwidth rule")
            return cls(kind)
        rule = parts[1] if len(parts) > 1 else "kl"
        if rule in ("kl", "cv"):
            if len(parts) > 2:
                raise DomainError(f"rule {rule!r} takes no value in {text!r}")
            if rule == "cv" and kind != "cmp":
                raise DomainError("cross-validated bandwidths are only available for cmp")
            return cls(kind, rule)
        if rule in ("fixed", "rate"):
            if len(parts) != 3:
                raise DomainError(f"rule {rule!r} needs a value, e.g. {kind}:{rule}:0.5")
            try:
                v = float(parts[2])
            except ValueError:
                raise DomainError(f"bad bandwidth value in {text!r}") from None
            if not (v >= 0 and math.isfinite(v)):
                raise DomainError(f"bandwidth value must be finite and >= 0 in {text!r}")
            return cls(kind, rule, v)
        raise DomainError(f"unknown bandwidth rule {rule!r} in {text!r}")

    @property
    def label(self) -> str:
        if self.rule is None:
            return self.kind
        if self.value is None:
            return f"{self.kind}:{self.rule}"
        return f"{self.kind}:{self.rule}:{self.value:g}"


def fit_estimator(
    spec: EstimatorSpec,
    sample: CountSample,
    triangular_a: int = 2,
    search: SearchConfig = DEFAULT_SEARCH,
) -> PmfEstimate:
    """Fit one estimator, selecting its bandwidth by the spec's rule."""
    if spec.kind == "histogram":
        return fit_histogram(sample)

    if spec.kind == "cmp":
        def fit(h):
            return fit_cmp_dak(sample, h, search.series, search.support)
        box = (search.h_floor, search.h_ceil)
    elif spec.kind == "triangular":
        def fit(h):
            return fit_triangular_dak(sample, TriangularKernelSpec(triangular_a, h))
        box = (search.h_floor, search.h_ceil)
    else:
        fit = lambda h: fit_binomial_dak(sample, h)  # noqa: E731
        box = (search.h_floor, 1.0)

    if spec.rule == "fixed":
        h = spec.value
    elif spec.rule == "rate":
        h = spec.value / math.sqrt(sample.n)
    elif spec.rule == "cv":
        h = select_h_cv(sample, search).h
    elif spec.kind == "cmp":
        h = select_h_kl(sample, search).h
    else:
        h = select_h_kl_for(sample, fit, *box, cfg=search).h
    return fit(h)


@dataclass(frozen=True)
class SimConfig:
    target: TargetSpec
    sample_sizes: tuple = (20, 50, 100)
    replications: int = 1000
    estimators: tuple = ("histogram", "binomial:kl", "triangular:kl", "cmp:kl", "cmp:cv")
    metrics: tuple = ("ise", "tail")
    tail_level: float = 0.99
    master_seed: int = 0
    triangular_a: int = 2
    record_timing: bool = False

    def __post_init__(self):
        if self.replications < 1:
            raise DomainError("replications must be at least 1")
        if not self.sample_sizes or min(self.sample_sizes) < 1:
            raise DomainError("sample sizes must be at least 1")
        if not 0 < self.tail_level < 1:
            raise DomainError("tail level must lie in (0, 1)")
        if not 0 <= self.master_seed < 2**64:
            raise DomainError("master seed must be an unsigned 64-bit integer")
        if not self.estimators:
            raise DomainError("at least one estimator is required")
        unknown = set(self.metrics) - {"ise", "tail"}
        if unknown:
            raise DomainError(f"unknown metrics {sorted(unknown)}")
        for e in self.estimators:
            EstimatorSpec.parse(e)


def replication_seed(master_seed: int, n: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(n, rep))


@dataclass
class FitRecord:
    estimator: str
    n: int
    rep: int
    fingerprint: str
    ise: float | None = None
    tail_r: float | None = None
    divergent: bool = False
    fit_ms: float = 0.0
    error: str | None = None


def _run_replication(cfg: SimConfig, n: int, rep: int, tail: TailQuery | None, p_true: float):
    sample = sample_target(cfg.target, n, replication_seed(cfg.master_seed, n, rep))
    fp = sample.fingerprint()
    out = []
    for text in cfg.estimators:
        spec = EstimatorSpec.parse(text)
        rec = FitRecord(spec.label, n, rep, fp)
        try:
            t0 = time.perf_counter()
            est = fit_estimator(spec, sample, cfg.triangular_a)
            rec.fit_ms = 1e3 * (time.perf_counter() - t0)
            if "ise" in cfg.metrics:
                rec.ise = ise(est, cfg.target)
            if tail is not None:
                outcome = tail_relative_error(tail_probability(est, tail.threshold), p_true)
                rec.tail_r, rec.divergent = outcome.value, outcome.divergent
        except (CmpdakError, ArithmeticError, ValueError) as e:
            rec.error = f"{type(e).__name__}: {e}"
        out.append(rec)
    return out


def _task(args):
    return _run_replication(*args)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _mean_sd(values):
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=float)
    mean = math.fsum(values) / len(values)
    sd = float(np.std(arr, ddof=1)) if len(values) > 1 else math.nan
    return mean, sd


SUMMARY_COLUMNS = (
    "target", "estimator", "n", "ise_mean", "ise_sd", "tail_r_mean", "tail_r_sd",
    "divergent_pct", "fit_ms_mean",
)


@dataclass
class SummaryRow:
    target: str
    estimator: str
    n: int
    ise_mean: float
    ise_sd: float
    tail_r_mean: float
    tail_r_sd: float
    divergent_pct: float
    fit_ms_mean: float | None
    ise_median: float = math.nan
    tail_r_median_all: float = math.nan
    n_ok: int = 0
    n_failed: int = 0
    n_divergent: int = 0


@dataclass
class SimSummary:
    rows: list
    tail_threshold: int | None = None
    tail_true: float | None = None
    failures: list = field(default_factory=list)

    def row(self, estimator: str, n: int) -> SummaryRow:
        for r in self.rows:
            if r.estimator == estimator and r.n == n:
                return r
        raise KeyError((estimator, n))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in SUMMARY_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "tail_threshold": self.tail_threshold,
            "tail_true": self.tail_true,
            "rows": [{k: _json_num(v) for k, v in asdict(r).items()} for r in self.rows],
            "failures": self.failures,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def rows_from_csv(text: str) -> list[dict]:
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            parsed = {}
            for k, v in rec.items():
                if k in ("target", "estimator"):
                    parsed[k] = v
                elif k == "n":
                    parsed[k] = int(v)
                else:
                    parsed[k] = None if v == "" else float(v)
            rows.append(parsed)
        return rows

    def table(self) -> str:
        """Plain-text table; ISE scaled by 1e3, values rounded to 4 places."""
        head = f"{'estimator':<22}{'n':>6}{'ISE mean':>12}{'ISE sd':>10}{'r mean':>10}{'r sd':>10}{'inf %':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.estimator:<22}{r.n:>6}{1e3 * r.ise_mean:>12.4f}{1e3 * r.ise_sd:>10.4f}"
                f"{r.tail_r_mean:>10.4f}{r.tail_r_sd:>10.4f}{r.divergent_pct:>8.1f}"
            )
        return "\n".join(lines)


def _json_num(v):
    # JSON has no NaN or infinity
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def run_study(cfg: SimConfig, threads: int | None = None) -> SimSummary:
    """Run every (n, replication) cell and aggregate per estimator and n.

    Replications may run in worker processes; results are collected by index
    so the summary never depends on completion order or ``threads``.
    """
    threads = default_threads() if threads is None else max(1, threads)
    tail = p_true = None
    if "tail" in cfg.metrics:
        tail = TailQuery.from_truth(cfg.target, cfg.tail_level)
        p_true = cfg.target.sf(tail.threshold)
    tasks = [(cfg, n, r, tail, p_true) for n in cfg.sample_sizes for r in range(cfg.replications)]
    if threads == 1:
        results = [_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * threads))))

    labels = [EstimatorSpec.parse(e).label for e in cfg.estimators]
    rows, failures = [], []
    for n in cfg.sample_sizes:
        cell = [recs for recs in results if recs[0].n == n]
        for recs in cell:
            if len({r.fingerprint for r in recs}) != 1:
                raise AssertionError("estimators saw different samples within one replication")
        for i, label in enumerate(labels):
            recs = [rr[i] for rr in cell]
            ok = [r for r in recs if r.error is None]
            failures.extend({"estimator": label, "n": n, "rep": r.rep, "error": r.error} for r in recs if r.error)
            ise_vals = [r.ise for r in ok if r.ise is not None]
            tails = [r.tail_r for r in ok if r.tail_r is not None]
            n_div = sum(r.divergent for r in ok)
            ise_m, ise_s = _mean_sd(ise_vals)
            r_m, r_s = _mean_sd(tails)
            all_r = [math.inf if r.divergent else r.tail_r for r in ok if r.divergent or r.tail_r is not None]
            rows.append(
                SummaryRow(
                    target=cfg.target.name,
                    estimator=label,
                    n=n,
                    ise_mean=ise_m,
                    ise_sd=ise_s,
                    tail_r_mean=r_m,
                    tail_r_sd=r_s,
                    divergent_pct=100.0 * n_div / len(ok) if (ok and tail) else math.nan,
                    fit_ms_mean=(math.fsum(r.fit_ms for r in ok) / len(ok)) if (ok and cfg.record_timing) else None,
                    ise_median=float(np.median(ise_vals)) if ise_vals else math.nan,
                    tail_r_median_all=float(np.median(all_r)) if all_r else math.nan,
                    n_ok=len(ok),
                    n_failed=len(recs) - len(ok),
                    n_divergent=n_div,
                )
            )
    return SimSummary(rows, tail.threshold if tail else None, p_true, failures)
