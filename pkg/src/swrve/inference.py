"""Wald t-tests and confidence intervals for the treatment effect."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from .errors import InvalidDof, InvalidSpec, NonPositiveDof
from .lmm import FitResult
from .rve import RobustVcov, robust_vcov

__all__ = [
    "WaldResult",
    "wald_test",
    "wald_from_se",
    "satterthwaite_dof",
    "satterthwaite_blocks",
    "parse_dof_rule",
    "t_quantile",
    "t_sf2",
]

DOF_RULES = ("I-2", "Satterthwaite")


@dataclass(frozen=True)
class WaldResult:
    estimate: float
    se: float
    dof: float
    t_stat: float
    p_value: float
    ci_low: float
    ci_high: float
    alpha: float = 0.05
    null: float = 0.0

    @property
    def reject(self) -> bool:
        return self.p_value < self.alpha

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict:
        return asdict(self)


def parse_dof_rule(rule) -> str:
    key = str(rule).strip().lower().replace("_", "").replace(" ", "")
    if key in ("i-2", "im2", "fixediminus2", "iminus2", "between"):
        return "I-2"
    if key in ("satterthwaite", "satt", "bm"):
        return "Satterthwaite"
    raise InvalidSpec(f"unknown dof rule {rule!r}; expected I-2 or Satterthwaite")


def _t_pdf(t, dof):
    return math.exp(special.gammaln((dof + 1) / 2) - special.gammaln(dof / 2)
                    - 0.5 * math.log(dof * math.pi) - (dof + 1) / 2 * math.log1p(t * t / dof))


def t_quantile(p: float, dof: float) -> float:
    q = float(special.stdtrit(dof, p))
    if not math.isfinite(q) or q == 0.0:
        return q
    # Newton on the smaller tail, which stdtr gets to full relative precision
    tail = min(p, 1.0 - p)
    sign = 1.0 if p > 0.5 else -1.0
    a = abs(q)
    for _ in range(2):
        a += (float(special.stdtr(dof, -a)) - tail) / _t_pdf(a, dof)
    return sign * a


def t_sf2(t: float, dof: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)``."""
    return float(min(1.0, 2.0 * special.stdtr(dof, -abs(t))))


def wald_from_se(estimate: float, se: float, dof: float, null: float = 0.0, alpha: float = 0.05) -> WaldResult:
    if not (dof > 0 and math.isfinite(dof)):
        raise InvalidDof(f"degrees of freedom must be positive, got {dof}")
    if not 0.0 < alpha < 1.0:
        raise InvalidSpec(f"alpha must be in (0, 1), got {alpha}")
    if not se > 0.0:
        raise InvalidSpec(f"standard error must be positive, got {se}")
    t = (estimate - null) / se
    q = t_quantile(1.0 - alpha / 2.0, dof)
    return WaldResult(
        estimate=float(estimate),
        se=float(se),
        dof=float(dof),
        t_stat=float(t),
        p_value=t_sf2(t, dof),
        ci_low=float(estimate - q * se),
        ci_high=float(estimate + q * se),
        alpha=float(alpha),
        null=float(null),
    )


def satterthwaite_blocks(X, V, G, A, c) -> float:
    """Moment-matching dof from per-cluster blocks.

    ``X`` is ``I x n x P``, ``V`` the working covariances, ``G`` the
    ``(X'V^-1 X)^-1`` bread, ``A`` the adjustments, ``c`` the contrast.
    Computes ``g_i = A_i' V_i^-1 X_i G c`` and the ``I x I`` matrix
    ``Omega_ij = g_i'(delta_ij V_i - X_i G X_j') g_j``.
    """
    Vinv = np.linalg.inv(V)
    Gc = G @ np.asarray(c, dtype=float)
    gvec = np.einsum("ilj,ilk,ikp,p->ij", A, Vinv, X, Gc)
    U = np.einsum("ijp,ij->ip", X, gvec)
    Omega = -U @ G @ U.T
    Omega[np.diag_indices_from(Omega)] += np.einsum("ij,ijl,il->i", gvec, V, gvec)
    tr = float(np.trace(Omega))
    if not tr > 0.0:
        raise NonPositiveDof("trace of the Satterthwaite moment matrix is not positive")
    return tr * tr / float(np.sum(Omega * Omega))


def satterthwaite_dof(fit: FitResult, rve: RobustVcov, contrast=None) -> float:
    """Satterthwaite dof for an adjustment-based sandwich (CR2 or CR3)."""
    if rve.adjustments is None:
        raise InvalidDof(f"Satterthwaite dof needs CR2 or CR3 adjustments, not {rve.estimator}")
    X, _, Vt, _, Ainv = fit.reduced()
    P = fit.n_params
    c = np.zeros(P)
    if contrast is None:
        c[-1] = 1.0
    else:
        c = np.asarray(contrast, dtype=float)
    return satterthwaite_blocks(X, Vt, Ainv, rve.adjustments, c)


def wald_test(fit: FitResult, vcov_source="model", dof_rule="I-2", null: float = 0.0,
              alpha: float = 0.05) -> WaldResult:
    """Two-sided test of the treatment coefficient.

    ``vcov_source`` is ``"model"``, an estimator name or a :class:`RobustVcov`.
    """
    rule = parse_dof_rule(dof_rule)
    if isinstance(vcov_source, RobustVcov):
        rv = vcov_source
        se = rv.treatment_se
    elif str(vcov_source).lower() == "model":
        rv = None
        se = float(np.sqrt(fit.model_vcov[-1, -1]))
    else:
        rv = robust_vcov(fit, str(vcov_source))
        se = rv.treatment_se
    if rule == "I-2":
        dof = fit.n_clusters - 2
        if dof <= 0:
            raise InvalidDof(f"I - 2 = {dof} is not a valid dof")
    else:
        if rv is None:
            raise InvalidDof("Satterthwaite dof is only provided for CR2/CR3 sandwiches")
        dof = satterthwaite_dof(fit, rv)
    return wald_from_se(fit.treatment_effect, se, dof, null, alpha)
