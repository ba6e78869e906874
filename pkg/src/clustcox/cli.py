"""Command-line interface: ``fit``, ``simulate`` and ``mc``.

Data goes to standard output or ``--out``; progress and diagnostics go to
standard error. Exit codes: 0 success, 2 input error, 3 numerical failure.
Error messages are one line starting with ``input-error:`` or
``numerical-error:``.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass
from typing import Sequence

from . import coxfit as cox
from .data import read_csv, write_csv
from .errors import InputError, NumericalError
from .inference import TestResult, wald_test
from .montecarlo import parse_grid, raw_dump_csv, run_grid, summary_csv
from .simulate import Scenario, arm_censoring, generate_trial
from .variance import LABELS, EstimatorKind, sandwich, with_corrected_scores

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

REPORT_COLUMNS = (
    "estimator", "log_hr", "ci_low", "ci_high", "hr", "hr_low", "hr_high",
    "se", "t_stat", "df", "p_value", "level", "error",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        sys.stderr.write(f"input-error: {message}\n")
        raise SystemExit(EXIT_INPUT)


def _labels(text: str | None) -> list[str]:
    if text is None:
        return list(LABELS)
    out = [s.strip().upper() for s in text.split(",") if s.strip()]
    bad = [s for s in out if s not in LABELS]
    if bad or not out:
        raise InputError(f"unknown estimator(s) {bad}; choose from {','.join(LABELS)}")
    return out


def _level(x: float) -> float:
    if not 0 < x < 1:
        raise InputError(f"--level must lie in (0, 1), got {x}")
    return x


def _fg_r(x: float) -> float:
    if not 0 < x < 1:
        raise InputError(f"--fg-r must lie in (0, 1), got {x}")
    return x


# -- fit report ---------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    label: str
    result: TestResult | None
    error: str | None = None


def format_report(rows: Sequence[ReportRow], digits: int = 5) -> str:
    """Human-readable table: log-HR and HR with confidence intervals, p-value."""
    if not rows:
        return ""
    level = next((r.result.level for r in rows if r.result is not None), 0.95)
    pct = f"{100 * level:g}%"
    head = ("Variance Estimator", f"Log of Hazard Ratio ({pct} CI)", f"Hazard Ratio ({pct} CI)", "p-value")
    f = f"{{:.{digits}f}}"
    body = []
    for r in rows:
        if r.result is None:
            body.append((r.label, "NA", "NA", f"NA ({r.error})"))
            continue
        t = r.result
        body.append((
            r.label,
            f"{f.format(t.estimate)} ({f.format(t.ci_low)}, {f.format(t.ci_high)})",
            f"{f.format(t.hr)} ({f.format(t.hr_low)}, {f.format(t.hr_high)})",
            f.format(t.p_value),
        ))
    widths = [max(len(x[i]) for x in [head] + body) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [head] + body]
    return "\n".join(lines) + "\n"


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        if r.result is None:
            w.writerow([r.label] + [""] * (len(REPORT_COLUMNS) - 2) + [r.error])
            continue
        t = r.result
        w.writerow([
            r.label, repr(t.estimate), repr(t.ci_low), repr(t.ci_high), repr(t.hr),
            repr(t.hr_low), repr(t.hr_high), repr(t.se), repr(t.t_stat), t.df,
            repr(t.p_value), repr(t.level), "",
        ])
    return buf.getvalue()


def read_report_csv(text: str) -> list[ReportRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        if rec["error"]:
            rows.append(ReportRow(rec["estimator"], None, rec["error"]))
            continue
        est = float(rec["log_hr"])
        rows.append(ReportRow(rec["estimator"], TestResult(
            estimate=est, hr=float(rec["hr"]), se=float(rec["se"]), t_stat=float(rec["t_stat"]),
            df=int(rec["df"]), p_value=float(rec["p_value"]), ci_low=float(rec["ci_low"]),
            ci_high=float(rec["ci_high"]), level=float(rec["level"]),
        )))
    return rows


def analyze(data, labels: Sequence[str], level: float = 0.95, fg_r: float = 0.75,
            coef: int = 0) -> list[ReportRow]:
    """Fit the model and test coefficient ``coef`` under each estimator.

    A numerical failure of one estimator is reported in its row; a failed
    fit raises.
    """
    if not 0 <= coef < data.p:
        raise InputError(f"--coef must be in [0, {data.p - 1}], got {coef}")
    res = cox.fit(data)
    if any(EstimatorKind(lb).uses_corrected_scores for lb in labels):
        res = with_corrected_scores(data, res)
    rows = []
    for lb in labels:
        try:
            v = sandwich(data, res, EstimatorKind(lb, fg_r))
            rows.append(ReportRow(lb, wald_test(res, v, coef, level)))
        except NumericalError as exc:
            rows.append(ReportRow(lb, None, f"{type(exc).__name__}: {exc}"))
    return rows


def cmd_fit(args: argparse.Namespace) -> int:
    labels = _labels(args.estimators)
    level = _level(args.level)
    data = read_csv(args.data)
    rows = analyze(data, labels, level, _fg_r(args.fg_r), args.coef)
    sys.stderr.write(
        f"clusters={data.n} subjects={data.n_subjects} events={int(data.event.sum())} "
        f"df={data.n - 1}\n"
    )
    sys.stdout.write(format_report(rows, args.digits))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(report_csv(rows))
    failed = [r.label for r in rows if r.result is None]
    if failed:
        sys.stderr.write(f"numerical-error: estimator(s) {','.join(failed)} failed\n")
        return EXIT_NUMERIC
    return EXIT_OK


def _scenario_from_args(args: argparse.Namespace) -> Scenario:
    return Scenario(
        n=args.n, mbar=args.mbar, cv=args.cv, tau=args.tau, p0=args.p0, pa=args.pa,
        kappa=args.kappa, beta=args.beta, seed=args.seed,
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    sc = _scenario_from_args(args)
    data = generate_trial(sc, args.rep)
    comments = [
        f"n = {sc.n}, mbar = {sc.mbar:g}, cv = {sc.cv:g}, tau = {sc.tau:g}, p0 = {sc.p0:g}, "
        f"pa = {sc.pa:g}, kappa = {sc.kappa:g}, beta = {sc.beta:g}, seed = {sc.seed}, rep = {args.rep}",
        f"theta = {sc.theta:.10g}",
        f"lambda0 = {sc.lambda0:.10g}",
        f"rho = {sc.rho:.10g}",
    ]
    text = write_csv(data, comments=comments)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    cens, tot = arm_censoring(data, 0.0)
    sys.stderr.write(
        f"clusters={data.n} subjects={data.n_subjects} "
        f"sizes={','.join(str(s) for s in data.sizes)} "
        f"censored={1 - data.event.mean():.4f} control_censored={cens / tot:.4f}\n"
    )
    return EXIT_OK


def cmd_mc(args: argparse.Namespace) -> int:
    labels = _labels(args.estimators)
    fg_r = _fg_r(args.fg_r)
    try:
        with open(args.grid, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read grid file: {exc}") from None
    grid = parse_grid(text, seed=args.seed)
    if args.workers < 1:
        raise InputError(f"--workers must be >= 1, got {args.workers}")
    sys.stderr.write(f"{len(grid)} scenario(s), {args.reps} replications each\n")
    summaries = run_grid(
        grid, args.reps, args.workers, labels, fg_r,
        progress=lambda msg: sys.stderr.write(msg + "\n"),
    )
    out = summary_csv(summaries, labels)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(out)
    else:
        sys.stdout.write(out)
    if args.raw_dump:
        with open(args.raw_dump, "w", encoding="utf-8", newline="") as fh:
            fh.write(raw_dump_csv(summaries, labels))
    if any(s.error for s in summaries):
        for s in summaries:
            if s.error:
                sys.stderr.write(f"numerical-error: {s.error}\n")
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clustcox", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="analyze a clustered trial CSV")
    p.add_argument("--data", required=True, help="CSV with header cluster,time,event,z1[,...]")
    p.add_argument("--out", help="write the report as CSV here")
    p.add_argument("--estimators", help=f"comma list from {','.join(LABELS)} (default: all)")
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    p.add_argument("--fg-r", type=float, default=0.75, help="FG leverage cap r")
    p.add_argument("--coef", type=int, default=0, help="covariate index to test (0-based)")
    p.add_argument("--digits", type=int, default=5, help="decimals in the printed report")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="write one simulated trial as CSV")
    p.add_argument("--n", type=int, required=True, help="number of clusters (even)")
    p.add_argument("--mbar", type=float, required=True, help="mean cluster size")
    p.add_argument("--cv", type=float, default=0.0, help="coefficient of variation of cluster sizes")
    p.add_argument("--tau", type=float, required=True, help="within-cluster Kendall tau")
    p.add_argument("--p0", type=float, default=0.2, help="net control-arm censoring")
    p.add_argument("--pa", type=float, default=0.2, help="administrative control-arm censoring")
    p.add_argument("--kappa", type=float, default=1.0, help="Weibull shape")
    p.add_argument("--beta", type=float, default=0.0, help="true log hazard ratio")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rep", type=int, default=0, help="replication index")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mc", help="run a Monte Carlo scenario grid")
    p.add_argument("--grid", required=True, help="scenario grid file")
    p.add_argument("--reps", type=int, default=5000)
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="summary CSV (default: standard output)")
    p.add_argument("--raw-dump", help="per-replication CSV")
    p.add_argument("--estimators")
    p.add_argument("--fg-r", type=float, default=0.75)
    p.set_defaults(func=cmd_mc)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        sys.stderr.write(f"input-error: {exc}\n")
        return EXIT_INPUT
    except NumericalError as exc:
        sys.stderr.write(f"numerical-error: {exc}\n")
        return EXIT_NUMERIC
    except OSError as exc:
        sys.stderr.write(f"input-error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
