"""Uncorrected and bias-corrected sandwich variance estimators.

Multiplicative estimators share the form ``Vm (sum_i C_i S_i S_i' C_i') Vm``
where ``S_i`` is the cluster score (ROB, KC, FG, MD) or its martingale
residual corrected version (MR, KCMR, FGMR, MDMR). MBN and MBNMR add a
scaled model-based term to an inflated sandwich.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import TrialData
from .errors import ComplexSquareRoot, DegenerateDesign, LeverageAtOne
from .coxfit import FitResult, _Design, _Tables, _cluster_sum

__all__ = [
    "LABELS",
    "EstimatorKind",
    "VarianceEstimate",
    "corrected_scores",
    "with_corrected_scores",
    "leverage_matrices",
    "correction_matrix",
    "sandwich",
    "mbn_assemble",
    "mbn_constants",
]

LABELS = ("ROB", "MR", "KC", "FG", "MD", "MBN", "KCMR", "FGMR", "MDMR", "MBNMR")
_MULTIPLICATIVE = {
    "ROB": "I", "MR": "I",
    "KC": "KC", "KCMR": "KC",
    "FG": "FG", "FGMR": "FG",
    "MD": "MD", "MDMR": "MD",
}
_USES_BC = {"MR", "KCMR", "FGMR", "MDMR", "MBNMR"}

LEVERAGE_EPS = 1e-10


@dataclass(frozen=True)
class EstimatorKind:
    label: str
    fg_r: float = 0.75

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValueError(f"unknown estimator {self.label!r}; expected one of {', '.join(LABELS)}")
        if not 0 < self.fg_r < 1:
            raise ValueError(f"fg_r must lie in (0, 1), got {self.fg_r}")

    @property
    def uses_corrected_scores(self) -> bool:
        return self.label in _USES_BC


def _kind(kind: EstimatorKind | str) -> EstimatorKind:
    return kind if isinstance(kind, EstimatorKind) else EstimatorKind(kind)


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    kind: EstimatorKind
    matrix: np.ndarray

    @property
    def label(self) -> str:
        return self.kind.label

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.matrix))


def _symmetrize(a: np.ndarray) -> np.ndarray:
    scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
    if np.max(np.abs(a - a.T)) > 1e-8 * scale:
        raise RuntimeError("internal error: assembled covariance is not symmetric")
    return (a + a.T) / 2


# -- martingale residual correction -----------------------------------------

def corrected_scores(data: TrialData, fit: FitResult) -> np.ndarray:
    """Bias-corrected cluster scores, shape (n, p).

    ``U_i^BC = (I + G_i Vm) U_i + T_i`` with

    * ``G_i = sum_j int (Z_ij - Zbar)(Z_ij - Zbar)' Y_ij exp(b'Z_ij) dLambda0``
      (the integral of ``Z - Zbar`` against the gradient path ``dD_ij'``), and
    * ``T_i = sum_u [sum_j Y_ij exp(b'Z_ij)(Z_ij - Zbar)] / S0 * dM_i.(u)``,
      where ``dM_i.`` is the increment of the within-cluster sum of
      martingale residuals.
    """
    design = _Design(data)
    tab = _Tables(design, fit.beta_hat, per_cluster=True)
    z = data.z
    lam = tab.cum_hazard()[:, None, None]
    a = tab.cum_zbar()
    q = tab.cum_zbar_outer()
    zz = z[:, :, None] * z[:, None, :]
    za = z[:, :, None] * a[:, None, :]
    g = _cluster_sum(data, tab.w[:, None, None] * (zz * lam - za - za.transpose(0, 2, 1) + q))

    # cluster-level residual increments and centred at-risk sums per event time
    dm = design.d_cluster - tab.r0 * tab.dlam[None, :]
    centred = tab.r1 - tab.r0[:, :, None] * tab.zbar[None, :, :]
    t = np.einsum("ika,ik->ia", centred, dm / tab.s0[None, :])

    u = fit.cluster_scores
    gu = np.einsum("iab,bc,ic->ia", g, fit.vm, u)
    return u + gu + t


def with_corrected_scores(data: TrialData, fit: FitResult) -> FitResult:
    """Return ``fit`` with ``residual_scores_bc`` populated."""
    if fit.residual_scores_bc is not None:
        return fit
    return replace(fit, residual_scores_bc=corrected_scores(data, fit))


# -- multiplicative corrections ---------------------------------------------

def leverage_matrices(fit: FitResult) -> np.ndarray:
    """``Omega_i Vm`` for every cluster, shape (n, p, p)."""
    return fit.cluster_gradients @ fit.vm


def _check_leverage(h: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvals(h)
    real = np.abs(eig.imag) <= 1e-12 * max(1.0, np.max(np.abs(eig)))
    if np.any(real & (eig.real >= 1 - LEVERAGE_EPS)):
        raise LeverageAtOne(
            f"cluster leverage eigenvalue {np.max(eig.real[real]):.12g} is at or above 1; "
            "correction undefined"
        )
    return eig


def correction_matrix(
    kind: EstimatorKind | str, omega_i: np.ndarray, vm: np.ndarray
) -> np.ndarray:
    """Cluster correction matrix ``C_i`` for a multiplicative estimator.

    ``KC``: ``(I - Omega_i Vm)^{-1/2}`` via the principal square root;
    ``FG``: ``diag{(1 - min(r, [Omega_i Vm]_jj))^{-1/2}}``;
    ``MD``: ``(I - Omega_i Vm)^{-1}``; ``ROB``/``MR``: identity.
    """
    kind = _kind(kind)
    family = _MULTIPLICATIVE.get(kind.label)
    if family is None:
        raise ValueError(f"{kind.label} is not a multiplicative estimator")
    h = np.atleast_2d(omega_i) @ np.atleast_2d(vm)
    p = h.shape[0]
    if family == "I":
        return np.eye(p)
    if family == "FG":
        return np.diag((1.0 - np.minimum(kind.fg_r, np.diag(h))) ** -0.5)
    eig = _check_leverage(h)
    if p == 1:
        f = 1.0 - h[0, 0]
        return np.array([[f ** -0.5 if family == "KC" else 1.0 / f]])
    m = np.eye(p) - h
    if family == "MD":
        return np.linalg.inv(m)
    lam, vecs = np.linalg.eig(m)
    if np.any(np.abs(lam.imag) > 1e-12 * max(1.0, np.max(np.abs(lam)))) or np.any(lam.real <= 0):
        raise ComplexSquareRoot(
            f"I - Omega_i Vm has eigenvalues {np.round(1 - eig, 12).tolist()}; "
            "no real principal inverse square root"
        )
    root = (vecs * lam.real ** -0.5) @ np.linalg.inv(vecs)
    return np.real(root)


def _scores_for(data: TrialData, fit: FitResult, kind: EstimatorKind) -> np.ndarray:
    if kind.uses_corrected_scores:
        if fit.residual_scores_bc is None:
            return corrected_scores(data, fit)
        return fit.residual_scores_bc
    return fit.cluster_scores


def _corrections(kind: EstimatorKind, fit: FitResult) -> np.ndarray:
    family = _MULTIPLICATIVE[kind.label]
    n, p = fit.cluster_scores.shape
    if family == "I":
        return np.broadcast_to(np.eye(p), (n, p, p))
    if p == 1:
        h = leverage_matrices(fit)[:, 0, 0]
        if family == "FG":
            return ((1.0 - np.minimum(kind.fg_r, h)) ** -0.5)[:, None, None]
        if np.any(h >= 1 - LEVERAGE_EPS):
            raise LeverageAtOne(
                f"cluster leverage {np.max(h):.12g} is at or above 1; correction undefined"
            )
        f = 1.0 - h
        c = f ** -0.5 if family == "KC" else 1.0 / f
        return c[:, None, None]
    return np.stack([correction_matrix(kind, om, fit.vm) for om in fit.cluster_gradients])


def sandwich(data: TrialData, fit: FitResult, kind: EstimatorKind | str) -> VarianceEstimate:
    """Covariance estimate of ``beta_hat`` for one of the ten estimators."""
    kind = _kind(kind)
    scores = _scores_for(data, fit, kind)
    if kind.label in ("MBN", "MBNMR"):
        return mbn_assemble(data, fit, scores, kind=kind)
    c = _corrections(kind, fit)
    cs = np.einsum("iab,ib->ia", c, scores)
    meat = cs.T @ cs
    return VarianceEstimate(kind, _symmetrize(fit.vm @ meat @ fit.vm))


def mbn_constants(sizes: np.ndarray, p: int) -> tuple[float, float]:
    """Small-sample factor ``c`` and additive weight ``delta`` of the MBN estimator."""
    n = len(sizes)
    if n <= p:
        raise DegenerateDesign(f"need more clusters than parameters (n={n}, p={p})")
    total = float(np.sum(sizes))
    c = (total - 1) / (total - p) * n / (n - 1)
    return c, min(0.5, p / (n - p))


def mbn_assemble(
    data: TrialData,
    fit: FitResult,
    scores: np.ndarray,
    kind: EstimatorKind | str = "MBN",
) -> VarianceEstimate:
    """Additive correction ``c Vs + delta * phi * Vm`` built from ``scores``.

    ``phi = max(1, c * trace(Vm sum S_i S_i') / p)``.
    """
    kind = _kind(kind)
    p = data.p
    c, delta = mbn_constants(data.sizes, p)
    meat = scores.T @ scores
    vs = fit.vm @ meat @ fit.vm
    phi = max(1.0, c * float(np.trace(fit.vm @ meat)) / p)
    return VarianceEstimate(kind, _symmetrize(c * vs + delta * phi * fit.vm))
