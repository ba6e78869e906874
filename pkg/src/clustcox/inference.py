"""Wald t-tests and confidence intervals with ``n - 1`` degrees of freedom."""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import special

from .errors import BadProbability, NonPositiveVariance
from .coxfit import FitResult
from .variance import VarianceEstimate

__all__ = ["TestResult", "t_cdf", "t_sf", "t_pdf", "t_quantile", "wald_test", "wald_from_se"]


def t_sf(t: float, df: float) -> float:
    """Upper tail probability ``P(T > t)`` of Student's t."""
    x = df / (df + t * t)
    tail = 0.5 * float(special.betainc(df / 2, 0.5, x))
    return tail if t >= 0 else 1.0 - tail


def t_cdf(t: float, df: float) -> float:
    return t_sf(-t, df)


def t_pdf(t: float, df: float) -> float:
    logc = special.gammaln((df + 1) / 2) - special.gammaln(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - (df + 1) / 2 * math.log1p(t * t / df))


def t_quantile(prob: float, df: float) -> float:
    """Inverse CDF of Student's t with ``df`` degrees of freedom.

    Starts from the inverse regularized incomplete beta function and applies
    two Newton steps on the tail probability. The result is antisymmetric in
    ``prob`` about 0.5 by construction.
    """
    if not 0.0 < prob < 1.0 or math.isnan(prob):
        raise BadProbability(f"probability must lie in (0, 1), got {prob!r}")
    if df <= 0:
        raise BadProbability(f"degrees of freedom must be positive, got {df!r}")
    if prob == 0.5:
        return 0.0
    tail = prob if prob < 0.5 else 1.0 - prob
    x = float(special.betaincinv(df / 2, 0.5, 2.0 * tail))
    t = math.sqrt(df * (1.0 - x) / x) if x > 0 else math.inf
    if math.isfinite(t):
        for _ in range(2):
            dens = t_pdf(t, df)
            if dens <= 0:
                break
            t += (t_sf(t, df) - tail) / dens
    return -t if prob < 0.5 else t


@dataclass(frozen=True)
class TestResult:
    """Wald test of one coefficient; the interval is on the log-HR scale."""

    __test__ = False  # keep pytest from collecting this class

    estimate: float
    hr: float
    se: float
    t_stat: float
    df: int
    p_value: float
    ci_low: float
    ci_high: float
    level: float

    @property
    def hr_low(self) -> float:
        return math.exp(self.ci_low)

    @property
    def hr_high(self) -> float:
        return math.exp(self.ci_high)


def wald_test(
    fit: FitResult,
    v: VarianceEstimate,
    coef_index: int = 0,
    level: float = 0.95,
    n_clusters: int | None = None,
) -> TestResult:
    """Two-sided Wald t-test of ``beta_k = 0`` using the variance ``v``.

    The reference distribution is t with ``n_clusters - 1`` degrees of
    freedom; ``n_clusters`` defaults to the number of clusters in ``fit``.
    """
    n = fit.n_clusters if n_clusters is None else n_clusters
    df = n - 1
    var = float(v.matrix[coef_index, coef_index])
    if not var > 0 or not math.isfinite(var):
        raise NonPositiveVariance(f"{v.label} variance of coefficient {coef_index} is {var!r}")
    return wald_from_se(float(fit.beta_hat[coef_index]), math.sqrt(var), df, level)


def wald_from_se(estimate: float, se: float, df: int, level: float = 0.95) -> TestResult:
    """Same test from a bare ``(estimate, se)`` pair."""
    if not 0 < level < 1:
        raise BadProbability(f"level must lie in (0, 1), got {level!r}")
    if not se > 0:
        raise NonPositiveVariance(f"standard error must be positive, got {se!r}")
    t = estimate / se
    q = t_quantile(1.0 - (1.0 - level) / 2.0, df)
    return TestResult(
        estimate, math.exp(estimate), se, t, df, min(1.0, 2.0 * t_sf(abs(t), df)),
        estimate - q * se, estimate + q * se, level,
    )
