"""Replicated simulation over a scenario grid.

Each replication simulates a trial, fits the marginal Cox model, computes
every requested variance estimator and runs the two-sided Wald t-test of
the intervention effect. Replications that fail numerically are kept as
failure records and excluded from every summary statistic.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import re
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import coxfit as cox
from .errors import ClustCoxError, GridParseError, InputError, TooFewReplications
from .inference import t_quantile
from .simulate import Scenario, generate_trial
from .variance import LABELS, EstimatorKind, leverage_matrices, sandwich, with_corrected_scores

__all__ = [
    "Replication",
    "EstimatorRow",
    "McSummary",
    "nominal_band",
    "run_replication",
    "summarize",
    "run_grid",
    "parse_grid",
    "expand_values",
    "summary_csv",
    "raw_dump_csv",
    "read_raw_dump",
    "SUMMARY_COLUMNS",
]

SUMMARY_COLUMNS = (
    "n", "mbar", "cv", "tau", "p0", "beta", "estimator",
    "reps_converged", "var_mc", "mean_variance", "relbias_pct", "type1_rate",
)


@dataclass(frozen=True)
class Replication:
    rep_index: int
    beta_hat: float = math.nan
    variances: dict = field(default_factory=dict)
    rejects: dict = field(default_factory=dict)
    failure: str | None = None
    leverage_in_unit: bool = False

    @property
    def ok(self) -> bool:
        return self.failure is None


def nominal_band(reps: int, alpha: float = 0.05, z: float = 1.96) -> tuple[float, float]:
    """Binomial margin of error around the nominal size for ``reps`` replications."""
    half = z * math.sqrt(alpha * (1 - alpha) / reps)
    return alpha - half, alpha + half


def run_replication(
    sc: Scenario,
    rep_index: int,
    labels: Sequence[str] = LABELS,
    fg_r: float = 0.75,
    alpha: float = 0.05,
) -> Replication:
    """Simulate, fit and test one replication; failures are returned, not raised."""
    try:
        data = generate_trial(sc, rep_index)
        res = cox.fit(data)
        if any(EstimatorKind(lb).uses_corrected_scores for lb in labels):
            res = with_corrected_scores(data, res)
        crit = t_quantile(1 - alpha / 2, data.n - 1)
        b = float(res.beta_hat[0])
        variances = {}
        rejects = {}
        for lb in labels:
            v = float(sandwich(data, res, EstimatorKind(lb, fg_r)).matrix[0, 0])
            if not v > 0:
                return Replication(rep_index, failure=f"NonPositiveVariance: {lb} variance {v!r}")
            variances[lb] = v
            rejects[lb] = abs(b / math.sqrt(v)) > crit
        h = leverage_matrices(res)[:, 0, 0]
        in_unit = bool(np.all((h > 0) & (h < 1)))
    except ClustCoxError as exc:
        return Replication(rep_index, failure=f"{type(exc).__name__}: {exc}")
    return Replication(rep_index, b, variances, rejects, None, in_unit)


@dataclass(frozen=True)
class EstimatorRow:
    label: str
    mean_variance: float
    relbias_pct: float
    type1_rate: float
    close_to_nominal: bool


@dataclass(frozen=True)
class McSummary:
    scenario: Scenario
    reps_requested: int
    reps_converged: int
    var_mc: float
    rows: tuple[EstimatorRow, ...]
    failures: dict = field(default_factory=dict)
    error: str | None = None
    records: tuple[Replication, ...] = field(default=(), repr=False)

    def row(self, label: str) -> EstimatorRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def summarize(
    replications: Iterable[Replication],
    scenario: Scenario | None = None,
    labels: Sequence[str] | None = None,
    alpha: float = 0.05,
) -> McSummary:
    """Percent relative bias and empirical size of each estimator.

    ``var_mc`` is the sample variance of ``beta_hat`` (divisor ``R - 1``)
    over converged replications. Sums use ``math.fsum`` so the result does
    not depend on the order records arrive in.
    """
    recs = sorted(replications, key=lambda r: r.rep_index)
    good = [r for r in recs if r.ok]
    failures = Counter(r.failure.split(":", 1)[0] for r in recs if not r.ok)
    if len(good) < 2:
        raise TooFewReplications(
            f"{len(good)} converged replications out of {len(recs)}; need at least 2"
        )
    if labels is None:
        labels = [lb for lb in LABELS if lb in good[0].variances]
    r = len(good)
    betas = [g.beta_hat for g in good]
    mean_b = math.fsum(betas) / r
    var_mc = math.fsum((b - mean_b) ** 2 for b in betas) / (r - 1)
    lo, hi = nominal_band(r, alpha)
    rows = []
    for lb in labels:
        mean_v = math.fsum(g.variances[lb] for g in good) / r
        rate = sum(g.rejects[lb] for g in good) / r
        rows.append(
            EstimatorRow(
                label=lb,
                mean_variance=mean_v,
                relbias_pct=(mean_v - var_mc) / var_mc * 100,
                type1_rate=rate,
                close_to_nominal=round(lo, 3) <= rate <= round(hi, 3),
            )
        )
    return McSummary(
        scenario=scenario,
        reps_requested=len(recs),
        reps_converged=r,
        var_mc=var_mc,
        rows=tuple(rows),
        failures=dict(sorted(failures.items())),
        records=tuple(recs),
    )


def _run_chunk(sc: Scenario, start: int, stop: int, labels: tuple, fg_r: float) -> list:
    return [run_replication(sc, k, labels, fg_r) for k in range(start, stop)]


def run_grid(
    grid: Sequence[Scenario],
    reps: int,
    workers: int = 1,
    labels: Sequence[str] = LABELS,
    fg_r: float = 0.75,
    progress: Callable[[str], None] | None = None,
) -> list[McSummary]:
    """Run ``reps`` replications of every scenario.

    Replication ``k`` of a scenario always uses the random streams keyed by
    ``(seed, k, cluster)``, so results do not depend on ``workers``. A
    scenario whose summary cannot be formed is reported with ``error`` set
    and does not affect the others.
    """
    if not grid:
        raise InputError("scenario grid is empty")
    if reps < 2:
        raise InputError(f"need at least 2 replications, got {reps}")
    labels = tuple(labels)
    chunk = max(1, min(250, math.ceil(reps / (4 * max(1, workers)))))
    tasks = [
        (si, start, min(reps, start + chunk))
        for si in range(len(grid))
        for start in range(0, reps, chunk)
    ]
    results: dict[int, list[Replication]] = {si: [] for si in range(len(grid))}
    if workers <= 1:
        for si, a, b in tasks:
            results[si].extend(_run_chunk(grid[si], a, b, labels, fg_r))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [
                (si, pool.submit(_run_chunk, grid[si], a, b, labels, fg_r))
                for si, a, b in tasks
            ]
            for si, fut in futs:
                results[si].extend(fut.result())

    out = []
    for si, sc in enumerate(grid):
        recs = results[si]
        try:
            summ = summarize(recs, sc, labels)
        except ClustCoxError as exc:
            fails = Counter(r.failure.split(":", 1)[0] for r in recs if not r.ok)
            summ = McSummary(
                sc, len(recs), sum(r.ok for r in recs), math.nan, (),
                dict(sorted(fails.items())), f"{type(exc).__name__}: {exc}", tuple(recs),
            )
        if progress is not None:
            failed = summ.reps_requested - summ.reps_converged
            progress(
                f"scenario {si + 1}/{len(grid)} n={sc.n} mbar={sc.mbar:g} cv={sc.cv:g} "
                f"tau={sc.tau:g} p0={sc.p0:g}: {summ.reps_converged}/{summ.reps_requested} "
                f"converged, {failed} failed {summ.failures or ''}".rstrip()
            )
        out.append(summ)
    return out


# -- grid file ---------------------------------------------------------------

_GRID_KEYS = ("n", "mbar", "cv", "tau", "p0", "pa", "kappa", "beta", "seed")
_REQUIRED = ("n", "mbar", "cv", "tau", "p0")
_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def expand_values(text: str) -> list[float]:
    """Expand ``a``, ``a,b,c`` or the inclusive range ``start:stop:step``."""
    text = text.strip()
    m = re.fullmatch(rf"({_NUM})\s*:\s*({_NUM})\s*:\s*({_NUM})", text)
    if m:
        a, b, step = (float(g) for g in m.groups())
        if step <= 0 or b < a:
            raise ValueError(f"range {text!r} needs step > 0 and stop >= start")
        count = int(math.floor((b - a) / step + 1e-9)) + 1
        return [round(a + k * step, 10) for k in range(count)]
    parts = [s.strip() for s in text.split(",")]
    if not parts or not all(re.fullmatch(_NUM, s) for s in parts):
        raise ValueError(f"cannot parse value {text!r}")
    return [float(s) for s in parts]


def parse_grid(text: str, seed: int = 0) -> list[Scenario]:
    """Parse ``[scenario]`` blocks of ``key = value`` lines into scenarios.

    Keys with several values (comma lists or ranges) are crossed within
    their block. ``seed`` is used for blocks that do not set one.
    """
    blocks: list[tuple[int, dict[str, tuple[int, list[float]]]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower() == "[scenario]":
            blocks.append((len(blocks) + 1, {}))
            continue
        if not blocks:
            raise GridParseError(f"line {lineno}: content before the first [scenario] block")
        block_no, kv = blocks[-1]
        if "=" not in line:
            raise GridParseError(f"line {lineno}: expected 'key = value'", block_no)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _GRID_KEYS:
            raise GridParseError(
                f"unknown key (expected one of {', '.join(_GRID_KEYS)})", block_no, key
            )
        if key in kv:
            raise GridParseError("key given twice", block_no, key)
        try:
            kv[key] = (lineno, expand_values(value))
        except ValueError as exc:
            raise GridParseError(str(exc), block_no, key) from None
    if not blocks:
        raise GridParseError("no [scenario] blocks found")

    scenarios = []
    for block_no, kv in blocks:
        for key in _REQUIRED:
            if key not in kv:
                raise GridParseError("missing required key", block_no, key)
        keys = [k for k in _GRID_KEYS if k in kv]
        for combo in itertools.product(*(kv[k][1] for k in keys)):
            params = dict(zip(keys, combo))
            for k in ("n", "seed"):
                if k in params:
                    if params[k] != int(params[k]):
                        raise GridParseError("must be an integer", block_no, k)
                    params[k] = int(params[k])
            params.setdefault("seed", seed)
            try:
                scenarios.append(Scenario(**params))
            except InputError as exc:
                raise GridParseError(str(exc), block_no) from None
    return scenarios


# -- CSV output --------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def summary_csv(summaries: Sequence[McSummary], labels: Sequence[str] | None = None) -> str:
    """One row per (scenario, estimator) in the plot-ready summary schema."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        sc = s.scenario
        head = [sc.n, f"{sc.mbar:g}", f"{sc.cv:g}", f"{sc.tau:g}", f"{sc.p0:g}", f"{sc.beta:g}"]
        wanted = labels if labels is not None else [r.label for r in s.rows]
        if s.error is not None:
            for lb in wanted:
                w.writerow(head + [lb, s.reps_converged, "nan", "nan", "nan", "nan"])
            continue
        for lb in wanted:
            r = s.row(lb)
            w.writerow(
                head + [lb, s.reps_converged, _fmt(s.var_mc), _fmt(r.mean_variance),
                        _fmt(r.relbias_pct), _fmt(r.type1_rate)]
            )
    return buf.getvalue()


def raw_dump_csv(summaries: Sequence[McSummary], labels: Sequence[str] = LABELS) -> str:
    """Every replication record, sufficient to recompute the summaries exactly."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["scenario", "n", "mbar", "cv", "tau", "p0", "pa", "kappa", "beta", "seed", "rep",
         "status", "beta_hat", "leverage_in_unit"]
        + [f"var_{lb}" for lb in labels]
        + [f"reject_{lb}" for lb in labels]
        + ["failure"]
    )
    for si, s in enumerate(summaries):
        sc = s.scenario
        head = [si, sc.n, repr(sc.mbar), repr(sc.cv), repr(sc.tau), repr(sc.p0), repr(sc.pa),
                repr(sc.kappa), repr(sc.beta), sc.seed]
        for r in s.records:
            if r.ok:
                w.writerow(
                    head + [r.rep_index, "ok", _fmt(r.beta_hat), int(r.leverage_in_unit)]
                    + [_fmt(r.variances[lb]) for lb in labels]
                    + [int(r.rejects[lb]) for lb in labels]
                    + [""]
                )
            else:
                w.writerow(
                    head + [r.rep_index, "failed", "nan", 0] + ["nan"] * len(labels)
                    + [""] * len(labels) + [r.failure]
                )
    return buf.getvalue()


def read_raw_dump(text: str) -> list[tuple[Scenario, list[Replication]]]:
    """Parse :func:`raw_dump_csv` output back into scenarios and records."""
    reader = csv.DictReader(io.StringIO(text))
    labels = [c[4:] for c in reader.fieldnames if c.startswith("var_")]
    grouped: dict[int, tuple[Scenario, list[Replication]]] = {}
    for row in reader:
        si = int(row["scenario"])
        if si not in grouped:
            sc = Scenario(
                n=int(row["n"]), mbar=float(row["mbar"]), cv=float(row["cv"]),
                tau=float(row["tau"]), p0=float(row["p0"]), pa=float(row["pa"]),
                kappa=float(row["kappa"]), beta=float(row["beta"]), seed=int(row["seed"]),
            )
            grouped[si] = (sc, [])
        rep = int(row["rep"])
        if row["status"] == "ok":
            rec = Replication(
                rep,
                float(row["beta_hat"]),
                {lb: float(row[f"var_{lb}"]) for lb in labels},
                {lb: row[f"reject_{lb}"] == "1" for lb in labels},
                None,
                row["leverage_in_unit"] == "1",
            )
        else:
            rec = Replication(rep, failure=row["failure"])
        grouped[si][1].append(rec)
    return [grouped[k] for k in sorted(grouped)]
