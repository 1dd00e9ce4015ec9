"""Cluster-robust sandwich covariance estimators for a REML fit.

All six estimators share the form ``G (sum_i X_i'V_i^-1 A_i r_i r_i'A_i'V_i^-1 X_i) G``
with ``G = (X'V^-1 X)^-1``.  ``A_i`` is the identity for CR0 and its scalar
rescalings, the bias-reduced-linearization matrix for CR2 and ``(I - H_i)^-1``
for CR3.  Each adjustment is block diagonal across the cell-mean and
within-cell coordinates of its cluster and is the identity on the latter,
so everything is computed on ``J x J`` blocks, once per treatment pattern.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateAdjustment,
    InvalidSpec,
    NotConverged,
    SingularLeverage,
    UndefinedCorrection,
)
from .lmm import FitResult

__all__ = [
    "ESTIMATORS",
    "RobustVcov",
    "cr0",
    "cr1_family",
    "cr2",
    "cr3",
    "robust_vcov",
    "leverage",
    "working_residual_cov",
    "EIG_FLOOR",
    "sandwich_blocks",
    "adjust_cr2",
    "adjust_cr3",
]

ESTIMATORS = ("CR0", "CR1", "CR1P", "CR1S", "CR2", "CR3")
EIG_FLOOR = 1e-10


@dataclass(frozen=True)
class RobustVcov:
    """A sandwich covariance of the fixed effects.

    ``adjustments`` holds the per-cluster ``A_i`` blocks on the scaled
    cell-mean coordinates when the estimator uses them (CR2, CR3).
    """

    estimator: str
    vcov: np.ndarray = field(repr=False)
    treatment_se: float
    factor: float = 1.0
    adjustments: np.ndarray | None = field(default=None, repr=False)
    degenerate: bool = False

    def se(self, index: int = -1) -> float:
        return float(np.sqrt(max(self.vcov[index, index], 0.0)))

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "vcov": self.vcov.tolist(),
            "treatment_se": self.treatment_se,
            "factor": self.factor,
            "degenerate": self.degenerate,
        }


def _check(fit: FitResult):
    if not fit.converged:
        raise NotConverged(f"fit did not converge ({fit.status})")


def sandwich_blocks(X, Vinv, resid, G, A=None):
    """Literal ``G (sum_i X_i'V_i^-1 A_i r_i r_i'A_i'V_i^-1 X_i) G`` over stacked equal-size blocks."""
    u = resid if A is None else np.einsum("ijl,il->ij", A, resid)
    s = np.einsum("ijp,ijl,il->ip", X, Vinv, u)
    V = G @ (s.T @ s) @ G
    return 0.5 * (V + V.T)


def adjust_cr3(X, V, G):
    """``(I - X_i G X_i' V_i^-1)^-1`` for stacked blocks."""
    n = V.shape[-1]
    H = np.einsum("ijp,pq,ikq,ikl->ijl", X, G, X, np.linalg.inv(V))
    M = np.eye(n) - H
    s = np.linalg.svd(M, compute_uv=False)
    if np.any(s[..., -1] <= 1e-12 * s[..., 0]):
        raise SingularLeverage("I - H_i is singular for some cluster")
    return np.linalg.inv(M)


def adjust_cr2(X, V, G):
    """``S_i M_i^{-1/2} S_i^{-1}`` for stacked blocks; returns ``(A, degenerate)``."""
    S, _ = _sym_pow(V, 0.5)
    Si, _ = _sym_pow(V, -0.5)
    Wr = V - np.einsum("ijp,pq,ilq->ijl", X, G, X)
    Mh, degenerate = _sym_pow(Si @ Wr @ Si, -0.5)
    return S @ Mh @ Si, degenerate


def _sandwich(fit: FitResult, adjust=None):
    X, resid, _, W, Ainv = fit.reduced()
    return sandwich_blocks(X, W, resid, Ainv, adjust)


def _result(name, V, factor=1.0, adjustments=None, degenerate=False):
    return RobustVcov(name, V, float(np.sqrt(max(V[-1, -1], 0.0))), factor, adjustments, degenerate)


def cr0(fit: FitResult) -> RobustVcov:
    _check(fit)
    return _result("CR0", _sandwich(fit))


def cr1_family(fit: FitResult, variant: str = "CR1") -> RobustVcov:
    """CR0 rescaled by ``I/(I-1)``, ``I/(I-P)`` or ``I(N-1)/((I-1)(N-P))``."""
    _check(fit)
    variant = variant.upper()
    I, P, N = fit.n_clusters, fit.n_params, fit.n_obs
    if variant == "CR1":
        factor = I / (I - 1)
    elif variant == "CR1P":
        if I <= P:
            raise UndefinedCorrection(f"CR1P needs more clusters than parameters (I={I}, P={P})")
        factor = I / (I - P)
    elif variant == "CR1S":
        factor = I * (N - 1) / ((I - 1) * (N - P))
    else:
        raise InvalidSpec(f"unknown CR1 variant {variant!r}")
    return _result(variant, factor * _sandwich(fit), factor)


def _group_blocks(fit: FitResult):
    s = fit._state
    g = fit.cells.group_of_cluster
    first = np.array([np.flatnonzero(g == k)[0] for k in range(s["Vt"].shape[0])])
    return s["X"][first], s["Vt"], s["W"], s["Ainv"], g


def working_residual_cov(fit: FitResult) -> np.ndarray:
    """``V_i - X_i G X_i'`` per cluster on the scaled cell means (relative to sigma^2)."""
    X, _, Vt, _, Ainv = fit.reduced()
    return Vt - np.einsum("ijp,pq,ilq->ijl", X, Ainv, X)


def leverage(fit: FitResult) -> np.ndarray:
    """Cluster leverages ``H_i = X_i G X_i' V_i^-1`` on the scaled cell means.

    On the within-cell coordinates ``H_i`` vanishes, so traces are complete.
    """
    X, _, _, W, Ainv = fit.reduced()
    return np.einsum("ijp,pq,ikq,ikl->ijl", X, Ainv, X, W)


def cr3(fit: FitResult) -> RobustVcov:
    _check(fit)
    Xg, Vt, _, Ainv, g = _group_blocks(fit)
    A = adjust_cr3(Xg, Vt, Ainv)[g]
    return _result("CR3", _sandwich(fit, A), adjustments=A)


def _sym_pow(M, power, floor=EIG_FLOOR):
    w, Q = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    small = w < floor
    with np.errstate(divide="ignore", invalid="ignore"):
        wp = np.where(small, 0.0, np.abs(w) ** power)
    return np.einsum("...jk,...k,...lk->...jl", Q, wp, Q), bool(small.any())


def cr2(fit: FitResult) -> RobustVcov:
    """Bias-reduced linearization: ``A_i = S_i M_i^{-1/2} S_i^{-1}``, ``S_i = V_i^{1/2}``.

    ``M_i = S_i^{-1}(V_i - X_i G X_i')S_i^{-1}``, so ``A_i (V_i - X_i G X_i') A_i' = V_i``.
    Eigenvalues of ``M_i`` below the floor are dropped from the inverse root
    and a :class:`DegenerateAdjustment` warning is issued.
    """
    _check(fit)
    Xg, Vt, _, Ainv, g = _group_blocks(fit)
    A, degenerate = adjust_cr2(Xg, Vt, Ainv)
    if degenerate:
        warnings.warn("CR2 adjustment is degenerate; pseudo-inverse root applied",
                      DegenerateAdjustment, stacklevel=2)
    A = A[g]
    return _result("CR2", _sandwich(fit, A), adjustments=A, degenerate=degenerate)


def robust_vcov(fit: FitResult, estimator: str) -> RobustVcov:
    name = estimator.upper()
    if name == "CR0":
        return cr0(fit)
    if name in ("CR1", "CR1P", "CR1S"):
        return cr1_family(fit, name)
    if name == "CR2":
        return cr2(fit)
    if name == "CR3":
        return cr3(fit)
    raise InvalidSpec(f"unknown estimator {estimator!r}; expected one of {', '.join(ESTIMATORS)}")
