"""Command-line interface: ``cmpdak fit | simulate | tailprob | targets``.

Exit codes: 0 on success, 2 for unreadable or invalid input, 3 for numeric
failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bandwidth import (
    BandwidthResult,
    Method,
    ReferenceFits,
    SearchConfig,
    fixed_bandwidth,
    select_h_cv,
    select_h_kl,
    select_h_kl_for,
)
from .errors import CmpdakError, ConvergenceError, DomainError, InsufficientDataError
from .estimators import (
    CountSample,
    EstimatorTag,
    PmfEstimate,
    SupportRule,
    TriangularKernelSpec,
    fit_binomial_dak,
    fit_cmp_dak,
    fit_histogram,
    fit_triangular_dak,
)
from .metrics import TailQuery, tail_probability, tail_relative_error
from .sim import (
    BUILTIN_TARGETS,
    SimConfig,
    TargetSpecError,
    default_threads,
    load_target,
    run_study,
)

EXIT_PARSE = 2
EXIT_NUMERIC = 3


class InputError(CmpdakError):
    """Unreadable or malformed user input (exit code 2)."""


@dataclass(frozen=True)
class Dataset:
    counts: CountSample
    source_path: str
    label: str | None = None


def parse_counts(text: str, source: str = "<input>") -> list[int]:
    """Counts from newline-separated integers or a one-column CSV.

    A non-numeric first line is taken as a header.  Blank lines are skipped.
    """
    values = []
    rows = list(csv.reader(io.StringIO(text)))
    for lineno, row in enumerate(rows, start=1):
        cells = [c.strip() for c in row]
        if not cells or all(c == "" for c in cells):
            continue
        if len(cells) != 1:
            raise InputError(f"{source}:{lineno}: expected one column, found {len(cells)}")
        cell = cells[0]
        try:
            v = int(cell)
        except ValueError:
            if lineno == 1 and not values:
                try:
                    float(cell)
                except ValueError:
                    continue  # header
            raise InputError(f"{source}:{lineno}: {cell!r} is not an integer count") from None
        if v < 0:
            raise InputError(f"{source}:{lineno}: negative count {v}")
        values.append(v)
    if not values:
        raise InputError(f"{source}: no counts found")
    return values


def load_dataset(path: str, label: str | None = None) -> Dataset:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"{path}: cannot read ({e.strerror})") from None
    return Dataset(CountSample.of(parse_counts(text, path)), path, label)


@dataclass
class FitReport:
    estimate: PmfEstimate
    bandwidth: BandwidthResult | None
    sample_summary: dict
    queries: list = field(default_factory=list)

    def to_dict(self) -> dict:
        bw = None
        if self.bandwidth is not None:
            b = self.bandwidth
            bw = {
                "h": b.h,
                "method": b.method.value,
                "objective_value": b.objective_value,
                "trace": [list(p) for p in b.trace],
                "reference_fits": None if b.reference_fits is None else vars(b.reference_fits),
                "degenerate": b.degenerate,
            }
        e = self.estimate
        return {
            "estimate": {
                "estimator": e.estimator_tag.value,
                "bandwidth": e.bandwidth,
                "x_max": e.x_max,
                "tail_mass": e.tail_mass,
                "probs": e.probs.tolist(),
            },
            "bandwidth": bw,
            "sample_summary": self.sample_summary,
            "queries": self.queries,
        }

    def to_json(self) -> str:
        # repr-based float output round-trips exactly (17 significant digits at most)
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "FitReport":
        e = data["estimate"]
        est = PmfEstimate(
            np.asarray(e["probs"], dtype=float), e["tail_mass"], EstimatorTag(e["estimator"]), e["bandwidth"]
        )
        b = data["bandwidth"]
        bw = None
        if b is not None:
            refs = None if b["reference_fits"] is None else ReferenceFits(**b["reference_fits"])
            bw = BandwidthResult(
                b["h"], Method(b["method"]), b["objective_value"],
                [tuple(p) for p in b["trace"]], refs, b["degenerate"],
            )
        return cls(est, bw, data["sample_summary"], data["queries"])


def _parse_bandwidth(text: str):
    if text in ("kl", "cv"):
        return text, None
    if text.startswith("fixed:"):
        try:
            h = float(text.split(":", 1)[1])
        except ValueError:
            raise InputError(f"--bandwidth: bad value in {text!r}") from None
        if not (h >= 0 and math.isfinite(h)):
            raise InputError(f"--bandwidth: h must be finite and >= 0, got {h}")
        return "fixed", h
    raise InputError(f"--bandwidth: expected kl, cv or fixed:<h>, got {text!r}")


def _parse_range(text: str) -> tuple[int, int]:
    try:
        a, b = (int(p) for p in text.split(":"))
    except ValueError:
        raise InputError(f"--prob-range: expected a:b with integers, got {text!r}") from None
    if a < 0 or b < a:
        raise InputError(f"--prob-range: need 0 <= a <= b, got {text!r}")
    return a, b


def _support_rule(text: str) -> SupportRule:
    if text == "auto":
        return SupportRule()
    try:
        v = int(text)
    except ValueError:
        raise InputError(f"--support-max: expected 'auto' or an integer, got {text!r}") from None
    if v < 0:
        raise InputError("--support-max must be non-negative")
    return SupportRule(fixed_max=v)


def fit_from_args(args, sample: CountSample) -> tuple[PmfEstimate, BandwidthResult | None]:
    rule, h = _parse_bandwidth(args.bandwidth)
    search = SearchConfig(support=_support_rule(args.support_max))
    kernel = args.kernel
    if kernel == "histogram":
        return fit_histogram(sample), None
    if kernel == "cmp":
        if rule == "kl":
            bw = select_h_kl(sample, search)
        elif rule == "cv":
            bw = select_h_cv(sample, search)
        else:
            bw = fixed_bandwidth(h)
        return fit_cmp_dak(sample, bw.h, search.series, search.support), bw
    if rule == "cv":
        raise InputError("--bandwidth cv is only available for --kernel cmp")
    if kernel == "triangular":
        def fit(hh):
            return fit_triangular_dak(sample, TriangularKernelSpec(args.triangular_a, hh))
        box = (search.h_floor, search.h_ceil)
    else:
        fit = lambda hh: fit_binomial_dak(sample, hh)  # noqa: E731
        box = (search.h_floor, 1.0)
    bw = fixed_bandwidth(h) if rule == "fixed" else select_h_kl_for(sample, fit, *box, cfg=search)
    return fit(bw.h), bw


def _summary(sample: CountSample) -> dict:
    return {
        "n": sample.n,
        "mean": sample.mean,
        "variance": sample.variance,
        "min": int(sample.values.min()),
        "max": sample.max_value,
    }


def _write_pmf_csv(path: Path, est: PmfEstimate):
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "prob"])
        for x, p in enumerate(est.probs):
            w.writerow([x, format(float(p), ".17g")])


def read_pmf_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["prob"]) for r in rows])


def cmd_fit(args) -> int:
    ds = load_dataset(args.input, args.label)
    est, bw = fit_from_args(args, ds.counts)
    queries = []
    for text in args.prob_range or []:
        a, b = _parse_range(text)
        p = float(est.pmf(np.arange(a, b + 1)).sum())
        if b > est.x_max:
            p += est.tail_mass
        queries.append({"query": f"P({a} <= X <= {b})", "probability": p})
    for k in args.prob_tail_ge or []:
        p = 1.0 if k <= 0 else tail_probability(est, k - 1)
        queries.append({"query": f"P(X >= {k})", "probability": p})
    for k in args.prob_tail_le or []:
        p = min(est.cdf(k) + (est.tail_mass if k > est.x_max else 0.0), 1.0)
        queries.append({"query": f"P(X <= {k})", "probability": p})
    report = FitReport(est, bw, _summary(ds.counts), queries)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_pmf_csv(out / "pmf.csv", est)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")

    s = report.sample_summary
    print(f"n={s['n']} mean={s['mean']:.4f} var={s['variance']:.4f} range=[{s['min']}, {s['max']}]")
    if bw is not None:
        print(f"kernel={args.kernel} h={bw.h:.4f} ({bw.method.value})")
    else:
        print(f"kernel={args.kernel}")
    for q in queries:
        print(f"{q['query']} = {q['probability']:.4f}")
    print(f"wrote {out / 'pmf.csv'} and {out / 'report.json'}")
    return 0


def cmd_tailprob(args) -> int:
    ds = load_dataset(args.input, args.label)
    est, bw = fit_from_args(args, ds.counts)
    truth = None
    if args.truth:
        try:
            truth = load_target(args.truth)
        except OSError as e:
            raise InputError(f"{args.truth}: cannot read ({e.strerror})") from None
    if args.threshold is not None:
        threshold = args.threshold
    elif truth is not None:
        threshold = TailQuery.from_truth(truth, args.level).threshold
    else:
        # empirical level-quantile of the data
        threshold = fit_histogram(ds.counts).upper_quantile(args.level)
    p_hat = tail_probability(est, threshold)
    result = {"threshold": threshold, "p_hat": p_hat}
    print(f"P(X > {threshold}) = {p_hat:.6g}")
    if truth is not None:
        p_true = truth.sf(threshold)
        result["p_true"] = p_true
        print(f"true P(X > {threshold}) = {p_true:.6g}")
        if p_true > 0:
            r = tail_relative_error(p_hat, p_true)
            result.update(r=r.value, divergent=r.divergent)
            print("relative error r = divergent" if r.divergent else f"relative error r = {r.value:.6g}")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tailprob.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return 0


def _parse_sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise InputError(f"--sizes: expected comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise InputError("--sizes: sample sizes must be >= 1")
    return sizes


def cmd_simulate(args) -> int:
    try:
        target = load_target(args.target)
    except OSError as e:
        raise InputError(f"{args.target}: cannot read ({e.strerror})") from None
    try:
        cfg = SimConfig(
            target=target,
            sample_sizes=_parse_sizes(args.sizes),
            replications=args.reps,
            estimators=tuple(e.strip() for e in args.estimators.split(",") if e.strip()),
            metrics=tuple(m.strip() for m in args.metrics.split(",") if m.strip()),
            tail_level=args.tail_level,
            master_seed=args.seed,
            triangular_a=args.triangular_a,
            record_timing=args.timing,
        )
    except DomainError as e:
        raise InputError(str(e)) from None
    summary = run_study(cfg, threads=args.threads)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(summary.to_csv(), encoding="utf-8")
    (out / "summary.json").write_text(summary.to_json(), encoding="utf-8")
    print(f"target={target.name} reps={cfg.replications} seed={cfg.master_seed}")
    print(summary.table())
    if summary.failures:
        print(f"{len(summary.failures)} fits failed; see summary.json", file=sys.stderr)
    print(f"wrote {out / 'summary.csv'} and {out / 'summary.json'}")
    return 0


def cmd_targets(args) -> int:
    if args.action == "list":
        for name, t in BUILTIN_TARGETS.items():
            parts = []
            for c in t.components:
                params = ", ".join(f"{k}={v:g}" for k, v in c.params.items())
                parts.append(f"{c.weight:.3g}*{c.kind.value}({params})")
            print(f"{name:<24}{' + '.join(parts)}")
        return 0
    if args.name not in BUILTIN_TARGETS:
        raise InputError(f"unknown target {args.name!r}; see 'cmpdak targets list'")
    print(json.dumps(BUILTIN_TARGETS[args.name].to_dict(), indent=2))
    return 0


def _add_fit_flags(p):
    p.add_argument("input", help="file of counts: one integer per line, or a one-column CSV")
    p.add_argument("--kernel", choices=["cmp", "triangular", "binomial", "histogram"], default="cmp")
    p.add_argument("--bandwidth", default="kl", help="kl (default), cv, or fixed:<h>")
    p.add_argument("--support-max", default="auto", help="'auto' or the largest x to report")
    p.add_argument("--triangular-a", type=int, default=2)
    p.add_argument("--label")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmpdak", description="Discrete kernel smoothing of count data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a pmf estimate and answer probability queries")
    _add_fit_flags(p)
    p.add_argument("--prob-range", action="append", metavar="A:B")
    p.add_argument("--prob-tail-ge", action="append", type=int, metavar="K")
    p.add_argument("--prob-tail-le", action="append", type=int, metavar="K")
    p.add_argument("--output", default="cmpdak-out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tailprob", help="estimate an upper-tail probability")
    _add_fit_flags(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--level", type=float, default=0.99)
    g.add_argument("--threshold", type=int)
    p.add_argument("--truth", help="target JSON file or builtin name")
    p.add_argument("--output")
    p.set_defaults(func=cmd_tailprob)

    p = sub.add_parser("simulate", help="run a Monte Carlo comparison study")
    p.add_argument("--target", required=True, help="target JSON file or builtin name")
    p.add_argument("--sizes", default="20,50,100")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimators", default="histogram,binomial:kl,triangular:kl,cmp:kl,cmp:cv")
    p.add_argument("--metrics", default="ise,tail")
    p.add_argument("--tail-level", type=float, default=0.99)
    p.add_argument("--triangular-a", type=int, default=2)
    p.add_argument("--threads", type=int, default=None, help="worker processes (env CMPDAK_THREADS)")
    p.add_argument("--timing", action="store_true", help="record wall-clock fit times")
    p.add_argument("--output", default="cmpdak-sim")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("targets", help="builtin simulation targets")
    tsub = p.add_subparsers(dest="action", required=True)
    tsub.add_parser("list")
    show = tsub.add_parser("show")
    show.add_argument("name")
    p.set_defaults(func=cmd_targets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 0) is None:
        args.threads = default_threads()
    try:
        return args.func(args)
    except TargetSpecError as e:
        print(f"error: invalid target spec at {e}", file=sys.stderr)
        return EXIT_PARSE
    except (InputError, InsufficientDataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except DomainError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (ConvergenceError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
