"""Two-arm cluster randomized trials with Clayton-dependent survival times.

Failure times follow a Weibull proportional hazards model
``S(t | z) = exp{-(lambda0 t)^kappa exp(z beta)}``. Within a cluster the
times are joined by a Clayton copula with Kendall's tau ``1/(2 theta + 1)``
and generated sequentially through the conditional distribution functions.
Censoring is ``min(C*, 1)`` with ``C* ~ Exponential(rho)``; ``lambda0`` and
``rho`` are calibrated so the control arm has administrative censoring
``pa`` and total censoring ``p0``.

Every cluster draws from its own counter-based (Philox) stream keyed by
``(seed, replication, cluster)``, so a trial does not depend on how the
work is scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize

from .data import TrialData
from .errors import BadRate, InvalidScenario, NoRoot

__all__ = [
    "Scenario",
    "theta_from_tau",
    "tau_from_theta",
    "solve_lambda0",
    "solve_rho",
    "cluster_rng",
    "draw_cluster_sizes",
    "clayton_times",
    "clayton_cluster",
    "generate_trial",
    "arm_censoring",
]

RHO_MAX = 1e3


def theta_from_tau(tau: float) -> float:
    return (1.0 / tau - 1.0) / 2.0


def tau_from_theta(theta: float) -> float:
    return 1.0 / (2.0 * theta + 1.0)


@dataclass(frozen=True)
class Scenario:
    n: int
    mbar: float
    cv: float
    tau: float
    p0: float
    pa: float = 0.2
    kappa: float = 1.0
    beta: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 2 or self.n % 2:
            raise InvalidScenario(f"n must be an even integer >= 2, got {self.n}")
        if not self.mbar >= 2:
            raise InvalidScenario(f"mbar must be at least 2, got {self.mbar}")
        if not self.cv >= 0:
            raise InvalidScenario(f"cv must be nonnegative, got {self.cv}")
        if not 0 < self.tau < 1:
            raise InvalidScenario(f"tau must lie in (0, 1), got {self.tau}")
        if not 0 < self.pa < 1:
            raise InvalidScenario(f"pa must lie in (0, 1), got {self.pa}")
        if not self.pa <= self.p0 < 1:
            raise InvalidScenario(
                f"need pa <= p0 < 1 (random censoring cannot lower total censoring), "
                f"got pa={self.pa}, p0={self.p0}"
            )
        if not self.kappa > 0:
            raise InvalidScenario(f"kappa must be positive, got {self.kappa}")
        if not math.isfinite(self.beta):
            raise InvalidScenario(f"beta must be finite, got {self.beta}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise InvalidScenario(f"seed must be a nonnegative integer, got {self.seed}")

    @property
    def theta(self) -> float:
        return theta_from_tau(self.tau)

    @property
    def lambda0(self) -> float:
        return solve_lambda0(self.pa, self.kappa)

    @property
    def rho(self) -> float:
        return solve_rho(self.p0, self.pa, self.lambda0, self.kappa)


def solve_lambda0(pa: float, kappa: float) -> float:
    """Weibull rate giving ``P(T > 1 | control) = pa``."""
    if not 0 < pa < 1 or not kappa > 0:
        raise BadRate(f"need 0 < pa < 1 and kappa > 0, got pa={pa}, kappa={kappa}")
    return (-math.log(pa)) ** (1.0 / kappa)


def _control_censoring(rho: float, lambda0: float, kappa: float) -> float:
    """``P(T > min(C*, 1))`` for the control arm with ``C* ~ Exp(rho)``."""

    def surv(c: float) -> float:
        return math.exp(-((lambda0 * c) ** kappa))

    if rho == 0:
        return surv(1.0)
    val, _ = integrate.quad(
        lambda c: rho * math.exp(-rho * c) * surv(c),
        0.0, 1.0, epsabs=1e-13, epsrel=1e-10, limit=200,
        points=[min(1.0, 1.0 / rho)],
    )
    return val + math.exp(-rho) * surv(1.0)


@lru_cache(maxsize=256)
def solve_rho(p0: float, pa: float, lambda0: float, kappa: float) -> float:
    """Exponential censoring rate giving total control-arm censoring ``p0``.

    Returns 0 when ``p0 == pa`` (administrative censoring only).
    """
    if p0 == pa:
        return 0.0
    if not pa < p0 < 1:
        raise NoRoot(f"total censoring p0={p0} must lie in (pa={pa}, 1)")
    target = lambda r: _control_censoring(r, lambda0, kappa) - p0
    if target(RHO_MAX) <= 0:
        raise NoRoot(f"p0={p0} not reachable with rho <= {RHO_MAX:g}")
    return float(optimize.brentq(target, 0.0, RHO_MAX, xtol=1e-14, rtol=1e-13, maxiter=500))


def cluster_rng(seed: int, rep_index: int, cluster_index: int) -> np.random.Generator:
    """Independent Philox stream for one cluster of one replication."""
    ss = np.random.SeedSequence([int(seed), int(rep_index), int(cluster_index)])
    return np.random.Generator(np.random.Philox(ss))


def draw_cluster_sizes(n: int, mbar: float, cv: float, rng: np.random.Generator) -> np.ndarray:
    """Gamma cluster sizes with mean ``mbar`` and coefficient of variation ``cv``.

    Draws are rounded to the nearest integer and sizes below 2 are set to 2.
    """
    if cv == 0:
        return np.full(n, max(2, int(math.floor(mbar + 0.5))), dtype=int)
    raw = rng.gamma(shape=1.0 / cv**2, scale=mbar * cv**2, size=n)
    return np.maximum(2, np.floor(raw + 0.5)).astype(int)


def clayton_times(
    u: np.ndarray, theta: float, z: float, beta: float, lambda0: float, kappa: float
) -> np.ndarray:
    """Map uniforms to Clayton-dependent Weibull failure times.

    Equivalent to the sequential recursion ``omega_h = (h-1) - A +
    (A - (h-2)) (1-u_h)^{-1/(theta+h-1)}`` with ``A = sum_{j<h} a_j``, written
    in the cancellation-free form ``log omega_h = log1p(exp(L_{h-1})
    expm1(c_h))`` where ``c_h = -log(1-u_h)/(theta+h-1)`` and ``L`` is the
    running sum of ``c``. Position 1 reduces to ``theta log omega_1 =
    -log(1-u_1)``.
    """
    u = np.asarray(u, dtype=float)
    h = np.arange(u.size)
    c = -np.log1p(-u) / (theta + h)
    prev = np.concatenate([[0.0], np.cumsum(c)[:-1]])
    with np.errstate(over="ignore", invalid="ignore"):
        log_omega = np.log1p(np.exp(prev) * np.expm1(c))
    log_omega = np.where(np.isnan(log_omega), np.inf, log_omega)
    return (theta * log_omega * math.exp(-z * beta)) ** (1.0 / kappa) / lambda0


def clayton_cluster(
    mi: int,
    theta: float,
    z: float,
    beta: float,
    lambda0: float,
    kappa: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw ``mi`` dependent failure times for one cluster."""
    return clayton_times(rng.random(mi), theta, z, beta, lambda0, kappa)


def _simulate_cluster(sc: Scenario, rep_index: int, i: int, rho: float, lambda0: float):
    rng = cluster_rng(sc.seed, rep_index, i)
    z = 1.0 if i < sc.n // 2 else 0.0
    m = int(draw_cluster_sizes(1, sc.mbar, sc.cv, rng)[0])
    t = clayton_cluster(m, sc.theta, z, sc.beta, lambda0, sc.kappa, rng)
    if rho > 0:
        cens = np.minimum(rng.exponential(1.0 / rho, size=m), 1.0)
    else:
        cens = np.ones(m)
    x = np.minimum(t, cens)
    return x, (t <= cens).astype(np.int8), np.full(m, z)


def generate_trial(sc: Scenario, rep_index: int = 0) -> TrialData:
    """One simulated trial; the first ``n/2`` clusters receive the intervention."""
    lambda0 = sc.lambda0
    rho = sc.rho
    parts = [_simulate_cluster(sc, rep_index, i, rho, lambda0) for i in range(sc.n)]
    x = np.concatenate([p[0] for p in parts])
    ev = np.concatenate([p[1] for p in parts])
    z = np.concatenate([p[2] for p in parts])
    cl = np.repeat(np.arange(sc.n), [len(p[0]) for p in parts])
    return TrialData.from_arrays(x, ev, z[:, None], cl)


def arm_censoring(data: TrialData, arm: float = 0.0) -> tuple[int, int]:
    """``(censored, total)`` subject counts in the arm with first covariate ``arm``."""
    mask = data.z[:, 0] == arm
    return int(np.sum(data.event[mask] == 0)), int(np.sum(mask))
