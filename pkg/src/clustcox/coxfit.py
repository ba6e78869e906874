"""Marginal Cox model under working independence.

All integrals against counting processes or the Breslow hazard are sums
over the distinct observed event times. Tied events share the full risk set
(Breslow handling) and the Breslow increment at a tied time is ``d(u)/S0(u)``.

Per-subject integrals up to ``X_ij`` are evaluated with running sums over
event times: if ``e`` is the number of event times ``<= X_ij`` then
``sum_{k < e} f_k`` is ``F[e]`` for the zero-padded cumulative sum ``F``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import TrialData
from .errors import NoConvergence, SingularInformation

__all__ = [
    "BreslowHazard",
    "FitResult",
    "StepPaths",
    "score",
    "information",
    "log_partial_likelihood",
    "fit",
    "breslow",
    "martingale_residuals",
    "cluster_scores",
    "cluster_score_parts",
    "cluster_gradients",
    "d_matrix",
]

COND_LIMIT = 1e12


class _Design:
    """Quantities of a dataset that do not depend on beta."""

    def __init__(self, data: TrialData) -> None:
        self.data = data
        x = data.time
        ev = data.event.astype(bool)
        self.event_times = np.unique(x[ev])
        k = self.event_times.size
        self.n_times = k
        # number of event times <= X_ij; subject at risk at u_k iff k < e_ij
        self.e = np.searchsorted(self.event_times, x, side="right")
        self.is_event = ev
        self.k_event = self.e[ev] - 1
        self.d = np.bincount(self.k_event, minlength=k).astype(float)
        n = data.n
        self.d_cluster = np.bincount(
            data.cluster[ev] * k + self.k_event, minlength=n * k
        ).reshape(n, k).astype(float)
        self.flat_idx = data.cluster * (k + 1) + self.e


def _suffix(a: np.ndarray) -> np.ndarray:
    """``out[k] = sum(a[k+1:])`` along the last axis of a (..., K+1) array."""
    cs = np.cumsum(a[..., ::-1], axis=-1)[..., ::-1]
    return cs[..., 1:]


def _padded_cumsum(a: np.ndarray) -> np.ndarray:
    """Zero-padded running sum along axis 0: ``out[e] = sum(a[:e])``."""
    out = np.zeros((a.shape[0] + 1,) + a.shape[1:])
    np.cumsum(a, axis=0, out=out[1:])
    return out


class _Tables:
    """Risk-set sums at every event time for a given beta."""

    def __init__(self, design: _Design, beta: np.ndarray, per_cluster: bool = False) -> None:
        data = design.data
        k = design.n_times
        z = data.z
        p = data.p
        self.design = design
        self.beta = beta
        self.eta = z @ beta
        self.w = np.exp(self.eta)
        w = self.w
        e = design.e

        self.s0 = _suffix(np.bincount(e, weights=w, minlength=k + 1))
        self.s1 = np.empty((k, p))
        for a in range(p):
            self.s1[:, a] = _suffix(np.bincount(e, weights=w * z[:, a], minlength=k + 1))
        s2 = np.empty((k, p, p))
        for a in range(p):
            for b in range(a, p):
                s2[:, a, b] = _suffix(
                    np.bincount(e, weights=w * z[:, a] * z[:, b], minlength=k + 1)
                )
                s2[:, b, a] = s2[:, a, b]
        self.s2 = s2
        self.zbar = self.s1 / self.s0[:, None]
        self.v = s2 / self.s0[:, None, None] - self.zbar[:, :, None] * self.zbar[:, None, :]
        self.dlam = design.d / self.s0

        if per_cluster:
            n = data.n
            size = n * (k + 1)
            idx = design.flat_idx
            self.r0 = _suffix(np.bincount(idx, weights=w, minlength=size).reshape(n, k + 1))
            self.r1 = np.empty((n, k, p))
            for a in range(p):
                self.r1[:, :, a] = _suffix(
                    np.bincount(idx, weights=w * z[:, a], minlength=size).reshape(n, k + 1)
                )

    # running sums evaluated at each subject's own time
    def cum_hazard(self) -> np.ndarray:
        return _padded_cumsum(self.dlam)[self.design.e]

    def cum_zbar(self) -> np.ndarray:
        return _padded_cumsum(self.dlam[:, None] * self.zbar)[self.design.e]

    def cum_v(self) -> np.ndarray:
        return _padded_cumsum(self.dlam[:, None, None] * self.v)[self.design.e]

    def cum_zbar_outer(self) -> np.ndarray:
        q = self.dlam[:, None, None] * self.zbar[:, :, None] * self.zbar[:, None, :]
        return _padded_cumsum(q)[self.design.e]

    def score(self) -> np.ndarray:
        d = self.design
        return (d.data.z[d.is_event] - self.zbar[d.k_event]).sum(axis=0)

    def information(self) -> np.ndarray:
        info = np.einsum("k,kab->ab", self.design.d, self.v)
        return (info + info.T) / 2

    def loglik(self) -> float:
        d = self.design
        return float(self.eta[d.is_event].sum() - np.log(self.s0[d.k_event]).sum())


def _as_beta(beta: Any, p: int) -> np.ndarray:
    return np.asarray(beta, dtype=float).reshape(p)


def _invert_information(info: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(info)):
        raise SingularInformation("information matrix has non-finite entries")
    eig = np.linalg.eigvalsh(info)
    top = eig[-1]
    if top <= 0 or eig[0] <= 0 or top / eig[0] > COND_LIMIT:
        raise SingularInformation(
            f"information matrix is not invertible (eigenvalues {eig.tolist()})"
        )
    vm = np.linalg.inv(info)
    return (vm + vm.T) / 2


# -- public operations -------------------------------------------------------

def score(data: TrialData, beta: Any) -> np.ndarray:
    """Independence estimating function ``sum Delta (Z - S1/S0)`` at ``beta``."""
    return _Tables(_Design(data), _as_beta(beta, data.p)).score()


def information(data: TrialData, beta: Any) -> np.ndarray:
    """Observed information ``sum_events (S2/S0 - S1 S1'/S0^2)``.

    Raises :class:`SingularInformation` when the matrix is not invertible
    (a nonpositive eigenvalue or condition number above 1e12).
    """
    info = _Tables(_Design(data), _as_beta(beta, data.p)).information()
    _invert_information(info)
    return info


def log_partial_likelihood(data: TrialData, beta: Any) -> float:
    return _Tables(_Design(data), _as_beta(beta, data.p)).loglik()


@dataclass(frozen=True)
class BreslowHazard:
    """Breslow cumulative baseline hazard as a right-continuous step function."""

    times: np.ndarray
    increments: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments)

    def __call__(self, t: Any) -> np.ndarray | float:
        cum = np.concatenate([[0.0], self.cumulative])
        out = cum[np.searchsorted(self.times, t, side="right")]
        return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class StepPaths:
    """Per-subject step functions evaluated at the distinct event times.

    ``values[s, k]`` is the value of subject ``s``'s path at ``times[k]``.
    """

    times: np.ndarray
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class FitResult:
    """Everything the sandwich variance estimators consume.

    ``cluster_scores`` has shape (n, p), ``cluster_gradients`` (n, p, p).
    ``residual_scores_bc`` stays ``None`` until
    :func:`clustcox.variance.with_corrected_scores` fills it.
    """

    beta_hat: np.ndarray
    vm: np.ndarray
    breslow: BreslowHazard
    cluster_scores: np.ndarray
    cluster_gradients: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    residual_scores_bc: np.ndarray | None = None
    loglik_path: tuple[float, ...] = field(default=(), repr=False)

    @property
    def n_clusters(self) -> int:
        return self.cluster_scores.shape[0]


def _step_accepted(new: float, old: float) -> bool:
    # slack absorbs round-off once the increase drops below machine resolution
    return math.isfinite(new) and new >= old - 1e-10 * max(1.0, abs(old))


def fit(
    data: TrialData,
    tol: float = 1e-8,
    max_iter: int = 50,
    max_halvings: int = 20,
    step_tol: float = 1e-6,
) -> FitResult:
    """Solve the independence estimating equations by damped Newton.

    Iterates ``beta <- beta + Vm U(beta)`` from zero. A step is halved
    (up to ``max_halvings`` times) while the log partial likelihood fails to
    increase. Iteration stops once ``max|U| <= tol`` and the Newton step is
    below ``step_tol``; the second condition keeps a monotone likelihood,
    where the score only vanishes as ``|beta| -> inf``, from being reported
    as converged.

    Raises
    ------
    NoConvergence
        ``max_iter`` exhausted, no improving step after all halvings, or the
        information degenerates along the path.
    SingularInformation
        The information is singular at the starting value.
    """
    design = _Design(data)
    beta = np.zeros(data.p)
    tab = _Tables(design, beta)
    ll = tab.loglik()
    path = [ll]
    u = tab.score()
    info = tab.information()
    vm = _invert_information(info)
    it = 0
    while True:
        step = vm @ u
        if np.max(np.abs(u)) <= tol and np.max(np.abs(step)) <= step_tol:
            break
        if it >= max_iter:
            raise NoConvergence(
                f"no convergence after {max_iter} iterations: beta={beta.tolist()}, "
                f"max|U|={np.max(np.abs(u)):.3g}; possible monotone likelihood"
            )
        it += 1
        scale = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + scale * step
            cand_tab = _Tables(design, cand)
            with np.errstate(all="ignore"):
                cand_ll = cand_tab.loglik()
            if _step_accepted(cand_ll, ll):
                break
            scale /= 2
        else:
            raise NoConvergence(
                f"log partial likelihood did not improve after {max_halvings} step halvings "
                f"at iteration {it}: beta={beta.tolist()}"
            )
        beta, tab, ll = cand, cand_tab, cand_ll
        path.append(ll)
        u = tab.score()
        info = tab.information()
        try:
            vm = _invert_information(info)
        except SingularInformation as exc:
            raise NoConvergence(
                f"information degenerated at iteration {it} (beta={beta.tolist()}); "
                "possible monotone likelihood"
            ) from exc

    full = _Tables(design, beta)
    return FitResult(
        beta_hat=beta,
        vm=vm,
        breslow=BreslowHazard(design.event_times, full.dlam),
        cluster_scores=_cluster_scores(full),
        cluster_gradients=_cluster_gradients(full),
        converged=True,
        iterations=it,
        loglik=ll,
        loglik_path=tuple(path),
    )


def breslow(data: TrialData, beta_hat: Any) -> BreslowHazard:
    """Breslow estimate ``sum_{u <= t} d(u) / S0(beta; u)``."""
    design = _Design(data)
    tab = _Tables(design, _as_beta(beta_hat, data.p))
    return BreslowHazard(design.event_times, tab.dlam)


def _cluster_sum(data: TrialData, per_subject: np.ndarray) -> np.ndarray:
    out = np.zeros((data.n,) + per_subject.shape[1:])
    np.add.at(out, data.cluster, per_subject)
    return out


def _score_parts(tab: _Tables) -> tuple[np.ndarray, np.ndarray]:
    d = tab.design
    data = d.data
    z = data.z
    dot = np.zeros_like(z)
    dot[d.is_event] = z[d.is_event] - tab.zbar[d.k_event]
    circ = -tab.w[:, None] * (z * tab.cum_hazard()[:, None] - tab.cum_zbar())
    return _cluster_sum(data, dot), _cluster_sum(data, circ)


def _cluster_scores(tab: _Tables) -> np.ndarray:
    dot, circ = _score_parts(tab)
    return dot + circ


def _cluster_gradients(tab: _Tables) -> np.ndarray:
    d = tab.design
    data = d.data
    z = data.z
    n_obs, p = z.shape
    lam = tab.cum_hazard()
    a = tab.cum_zbar()
    w = tab.w[:, None, None]
    term1 = np.zeros((n_obs, p, p))
    term1[d.is_event] = tab.v[d.k_event]
    term2 = -w * tab.cum_v()
    zz = z[:, :, None] * z[:, None, :]
    term3 = w * (zz * lam[:, None, None] - a[:, :, None] * z[:, None, :])
    return _cluster_sum(data, term1 + term2 + term3)


def cluster_score_parts(data: TrialData, beta: Any) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster event part and compensator part of the score at ``beta``.

    Returns ``(dot, circ)`` with shapes (n, p); ``circ`` sums to zero over
    clusters at any ``beta``.
    """
    return _score_parts(_Tables(_Design(data), _as_beta(beta, data.p)))


def cluster_scores(data: TrialData, fit_result: FitResult) -> np.ndarray:
    """Estimated cluster martingale scores at ``beta_hat``, shape (n, p)."""
    return _cluster_scores(_Tables(_Design(data), fit_result.beta_hat))


def cluster_gradients(data: TrialData, fit_result: FitResult) -> np.ndarray:
    """Per-cluster gradient matrices from the three-term formula, shape (n, p, p).

    The Breslow increments enter as fixed weights, so each matrix is the
    negative derivative of the cluster score with the increments held at
    their fitted values. The matrices sum to the observed information.
    """
    return _cluster_gradients(_Tables(_Design(data), fit_result.beta_hat))


def martingale_residuals(data: TrialData, fit_result: FitResult) -> StepPaths:
    """Residual paths ``N(t) - exp(beta'Z) * int_0^t Y dLambda0``.

    ``values[:, -1]`` is the residual at the last event time, which equals
    the terminal residual ``Delta - exp(beta'Z) Lambda0(X)``.
    """
    design = _Design(data)
    tab = _Tables(design, fit_result.beta_hat)
    k = design.n_times
    cols = np.arange(k)
    at_risk = cols[None, :] < design.e[:, None]
    comp = np.cumsum(at_risk * tab.dlam[None, :], axis=1) * tab.w[:, None]
    counted = np.zeros((data.n_subjects, k))
    ev = np.flatnonzero(design.is_event)
    counted[ev, design.k_event] = 1.0
    return StepPaths(design.event_times, np.cumsum(counted, axis=1) - comp)


def d_matrix(data: TrialData, fit_result: FitResult) -> StepPaths:
    """Cumulative gradient paths ``int_0^t (Z - S1/S0) Y exp(beta'Z) dLambda0``.

    ``values`` has shape (N, K, p).
    """
    design = _Design(data)
    tab = _Tables(design, fit_result.beta_hat)
    k = design.n_times
    at_risk = np.arange(k)[None, :] < design.e[:, None]
    inc = (data.z[:, None, :] - tab.zbar[None, :, :]) * (
        at_risk * tab.w[:, None] * tab.dlam[None, :]
    )[:, :, None]
    return StepPaths(design.event_times, np.cumsum(inc, axis=1))
