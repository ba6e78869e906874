"""Clustered right-censored survival data and at-risk sums.

A :class:`TrialData` stores subjects as flat read-only arrays ordered by
cluster (first-appearance order) and then by input order within a cluster.
Cluster labels from the input are kept in :attr:`TrialData.cluster_ids`; the
arrays refer to clusters by their index ``0..n-1``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Any, Hashable, Iterable, Sequence, TextIO

import numpy as np

from .errors import (
    BadEventFlag,
    ConstantCovariates,
    EmptyRecords,
    NoEvents,
    NonPositiveTime,
    RaggedCovariates,
    SchemaError,
    TooFewClusters,
)

__all__ = [
    "Subject",
    "TrialData",
    "RiskSums",
    "validate",
    "risk_sums",
    "read_csv",
    "write_csv",
]


@dataclass(frozen=True)
class Subject:
    time: float
    event: int
    covariates: tuple[float, ...]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TrialData:
    """Validated clustered survival data.

    Attributes
    ----------
    time : (N,) float array
        Observed times ``min(T, C)``.
    event : (N,) int array
        1 if the failure was observed, 0 if censored.
    z : (N, p) float array
        Time-constant covariates.
    cluster : (N,) int array
        Cluster index of each subject, nondecreasing.
    cluster_ids : tuple
        Original cluster label of each cluster index.
    """

    time: np.ndarray
    event: np.ndarray
    z: np.ndarray
    cluster: np.ndarray
    cluster_ids: tuple

    @classmethod
    def from_arrays(
        cls,
        time: Any,
        event: Any,
        z: Any,
        cluster: Any,
        *,
        lines: Sequence[int] | None = None,
    ) -> "TrialData":
        """Validate array input and build a :class:`TrialData`.

        ``cluster`` may hold arbitrary hashable labels. ``lines`` optionally
        maps each row to a source line number used in error messages.
        """
        time = np.asarray(time, dtype=float)
        n_obs = time.shape[0] if time.ndim else 0
        if n_obs == 0:
            raise EmptyRecords("no subject records")
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != n_obs:
            raise RaggedCovariates("covariate rows do not match the number of subjects")
        event_raw = np.asarray(event)
        labels = list(cluster)
        if len(labels) != n_obs or event_raw.shape[0] != n_obs:
            raise RaggedCovariates("time, event and cluster lengths differ")

        def where(i: int) -> int | None:
            return None if lines is None else lines[i]

        bad = np.flatnonzero(~(np.isfinite(time) & (time > 0)))
        if bad.size:
            i = int(bad[0])
            raise NonPositiveTime(f"time must be positive and finite, got {time[i]!r}", where(i))
        ev = np.asarray(event_raw, dtype=float)
        bad = np.flatnonzero((ev != 0) & (ev != 1))
        if bad.size:
            i = int(bad[0])
            raise BadEventFlag(f"event must be 0 or 1, got {event_raw[i]!r}", where(i))
        if not np.all(np.isfinite(z)):
            i = int(np.flatnonzero(~np.all(np.isfinite(z), axis=1))[0])
            raise RaggedCovariates("covariates must be finite numbers", where(i))

        index: dict[Hashable, int] = {}
        cl = np.empty(n_obs, dtype=np.intp)
        for i, lab in enumerate(labels):
            cl[i] = index.setdefault(lab, len(index))
        if len(index) < 2:
            raise TooFewClusters(f"need at least 2 clusters, got {len(index)}")
        if not np.any(ev == 1):
            raise NoEvents("no subject has an observed event")
        if np.all(np.ptp(z, axis=0) == 0):
            raise ConstantCovariates("every covariate column is constant; the model is not identifiable")

        order = np.argsort(cl, kind="stable")
        return cls(
            time=_readonly(time[order]),
            event=_readonly(ev[order].astype(np.int8)),
            z=_readonly(z[order]),
            cluster=_readonly(cl[order]),
            cluster_ids=tuple(index),
        )

    @property
    def n(self) -> int:
        return len(self.cluster_ids)

    @property
    def p(self) -> int:
        return self.z.shape[1]

    @property
    def n_subjects(self) -> int:
        return self.time.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.n)

    @property
    def clusters(self) -> tuple[tuple[Subject, ...], ...]:
        out: list[list[Subject]] = [[] for _ in range(self.n)]
        for t, d, zz, c in zip(self.time, self.event, self.z, self.cluster):
            out[c].append(Subject(float(t), int(d), tuple(float(v) for v in zz)))
        return tuple(tuple(c) for c in out)


def validate(
    records: Iterable[tuple[Hashable, float, int, Sequence[float]]],
    *,
    lines: Sequence[int] | None = None,
) -> TrialData:
    """Build :class:`TrialData` from ``(cluster, time, event, covariates)`` records.

    Records belonging to a cluster may appear in any order and need not be
    contiguous. Raises a subclass of :class:`~clustcox.errors.InputError`
    naming the first violated invariant.
    """
    records = list(records)
    if not records:
        raise EmptyRecords("no subject records")
    p = None
    for i, rec in enumerate(records):
        k = len(rec[3])
        if p is None:
            p = k
        elif k != p:
            raise RaggedCovariates(
                f"expected {p} covariates, got {k}", None if lines is None else lines[i]
            )
    if p == 0:
        raise RaggedCovariates("at least one covariate is required")
    return TrialData.from_arrays(
        [r[1] for r in records],
        [r[2] for r in records],
        np.array([r[3] for r in records], dtype=float).reshape(len(records), p),
        [r[0] for r in records],
        lines=lines,
    )


@dataclass(frozen=True)
class RiskSums:
    """Weighted at-risk sums of order 0, 1 and 2 at a single time."""

    s0: float
    s1: np.ndarray
    s2: np.ndarray


def risk_sums(data: TrialData, beta: Any, t: float) -> RiskSums:
    """Sum ``Y(t) exp(beta'Z) Z^{(x)r}`` over every subject, ``r = 0, 1, 2``.

    A subject is at risk at ``t`` when its observed time is ``>= t``.
    """
    beta = np.asarray(beta, dtype=float).reshape(data.p)
    at_risk = data.time >= t
    z = data.z[at_risk]
    w = np.exp(z @ beta)
    s1 = w @ z
    s2 = (z * w[:, None]).T @ z
    return RiskSums(s0=float(w.sum()), s1=s1, s2=(s2 + s2.T) / 2)


# -- CSV ---------------------------------------------------------------------

def _expected_schema(p: int | None = None) -> str:
    if p is None:
        return "cluster,time,event,z1[,z2,...,zp]"
    return ",".join(["cluster", "time", "event"] + [f"z{k + 1}" for k in range(p)])


def read_csv(source: str | TextIO) -> TrialData:
    """Read a trial from CSV text with header ``cluster,time,event,z1[,...]``.

    Lines starting with ``#`` are comments. ``source`` is a path or an open
    text stream.
    """
    if isinstance(source, str):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_csv(fh)

    header: list[str] | None = None
    records = []
    lines = []
    for lineno, raw in enumerate(source, start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = next(csv.reader([stripped]))
        fields = [f.strip() for f in fields]
        if header is None:
            header = fields
            p = len(fields) - 3
            if p < 1 or fields[:3] != ["cluster", "time", "event"] or fields[3:] != [
                f"z{k + 1}" for k in range(p)
            ]:
                raise SchemaError(
                    f"missing or malformed header; expected {_expected_schema()}", lineno
                )
            continue
        if len(fields) != len(header):
            raise RaggedCovariates(
                f"expected {len(header)} fields ({_expected_schema(len(header) - 3)}), got {len(fields)}",
                lineno,
            )
        cid = fields[0]
        try:
            t = float(fields[1])
        except ValueError:
            raise NonPositiveTime(f"time is not a number: {fields[1]!r}", lineno) from None
        if fields[2] not in ("0", "1"):
            raise BadEventFlag(f"event must be 0 or 1, got {fields[2]!r}", lineno)
        try:
            zz = [float(v) for v in fields[3:]]
        except ValueError:
            raise RaggedCovariates(f"covariate is not a number in {fields[3:]!r}", lineno) from None
        if not math.isfinite(t) or t <= 0:
            raise NonPositiveTime(f"time must be positive and finite, got {fields[1]!r}", lineno)
        records.append((cid, t, int(fields[2]), zz))
        lines.append(lineno)
    if header is None:
        raise SchemaError(f"empty input; expected header {_expected_schema()}")
    return validate(records, lines=lines)


def write_csv(data: TrialData, dest: TextIO | None = None, comments: Sequence[str] = ()) -> str:
    """Write ``data`` in the CSV schema accepted by :func:`read_csv`.

    Floats are written with ``repr`` so a round trip is exact. Returns the
    text when ``dest`` is None.
    """
    buf = io.StringIO() if dest is None else dest
    for c in comments:
        buf.write(f"# {c}\n")
    buf.write(_expected_schema(data.p) + "\n")
    for t, d, zz, c in zip(data.time, data.event, data.z, data.cluster):
        cells = [str(data.cluster_ids[c]), repr(float(t)), str(int(d))]
        cells += [repr(float(v)) for v in zz]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue() if dest is None else ""
