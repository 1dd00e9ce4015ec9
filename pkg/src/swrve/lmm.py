"""Profiled-REML linear mixed model fits for balanced cross-sectional stepped-wedge data.

With equal cluster-period sizes every working structure makes observations in
the same cell exchangeable, so each cluster factors exactly into its ``J``
scaled cell means (covariance ``sigma^2 Vt_i``) and ``J(K-1)`` within-cell
contrasts (covariance ``sigma^2 I``, orthogonal to the fixed effects).  The
likelihood, GLS estimate and all sandwich estimators are computed on the
means; nothing of size ``n_i x n_i`` is ever formed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .covariance import CovStructure, VarianceComponents, build_Z_R, woodbury_inverse
from .datagen import Dataset
from .design import TrialDesign, cell_design_matrix, staircase
from .errors import InvalidSpec, NonConvergence, SchemaError, SingularDesign
from .optim import minimize_bounded

__all__ = [
    "CellData",
    "FitOptions",
    "FitResult",
    "reml_fit",
    "gls",
    "profile_sigma",
    "reml_objective",
]

FIXED_EFFECTS = ("period+treatment", "intercept")
R_MAX = 1.0 - 1e-6
THETA_MAX = 1e3

# positions of each structure's parameters inside (a2, g2, v2, r)
_SLOTS = {
    CovStructure.EXCH: (0,),
    CovStructure.NE: (0, 1),
    CovStructure.NE_RI: (0, 1, 2),
    CovStructure.DTD_RI: (1, 2, 3),
}


@dataclass(frozen=True)
class CellData:
    """Cell-mean sufficient statistics of a balanced dataset.

    ``means`` is ``I x J``; ``ssw`` is the pooled within-cell sum of squares.
    Clusters with the same treatment row form a group and share ``X`` and the
    relative covariance, which is what makes the objective cheap.
    """

    n_clusters: int
    n_periods: int
    cluster_period_size: int
    treatment: np.ndarray = field(repr=False)
    means: np.ndarray = field(repr=False)
    ssw: float = field(repr=False)
    fixed_effects: str = "period+treatment"
    group_of_cluster: np.ndarray = field(repr=False, default=None)
    group_rows: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.fixed_effects not in FIXED_EFFECTS:
            raise InvalidSpec(f"fixed_effects must be one of {', '.join(FIXED_EFFECTS)}")
        treatment = np.ascontiguousarray(self.treatment, dtype=float)
        rows, inverse = np.unique(treatment, axis=0, return_inverse=True)
        object.__setattr__(self, "treatment", treatment)
        object.__setattr__(self, "group_rows", rows)
        object.__setattr__(self, "group_of_cluster", inverse.reshape(-1).astype(np.intp))

    @property
    def n_obs(self) -> int:
        return self.n_clusters * self.n_periods * self.cluster_period_size

    @property
    def n_params(self) -> int:
        return 1 if self.fixed_effects == "intercept" else self.n_periods + 1

    def cell_rows(self, treatment_row) -> np.ndarray:
        """``J x P`` cell-level design for one treatment row."""
        if self.fixed_effects == "intercept":
            return np.ones((self.n_periods, 1))
        return cell_design_matrix(treatment_row)

    @classmethod
    def from_dataset(cls, data: Dataset, design: TrialDesign | None = None,
                     fixed_effects: str = "period+treatment") -> "CellData":
        cluster = np.asarray(data.cluster, dtype=np.intp)
        period = np.asarray(data.period, dtype=np.intp) - 1
        if len(data) == 0:
            raise SchemaError("dataset has no rows")
        I, J = int(cluster.max()) + 1, int(period.max()) + 1
        if cluster.min() < 0 or period.min() < 0:
            raise SchemaError("cluster indices must be >= 0 and periods >= 1")
        cell = cluster * J + period
        counts = np.bincount(cell, minlength=I * J)
        K = int(counts[0])
        if K < 1 or np.any(counts != K):
            raise SchemaError("every cluster-period must hold the same number of individuals")
        treated = np.asarray(data.treated, dtype=float)
        tsum = np.bincount(cell, weights=treated, minlength=I * J)
        if np.any((tsum != 0) & (tsum != K)):
            raise SchemaError("treatment must be constant within a cluster-period")
        grid = (tsum / K).reshape(I, J)
        if design is not None:
            if (design.n_clusters, design.n_periods, design.cluster_period_size) != (I, J, K):
                raise SchemaError("dataset dimensions do not match the design")
            if not np.array_equal(grid, design.treatment):
                raise SchemaError("dataset treatment column does not match the design")
        y = np.asarray(data.y, dtype=float)
        ysum = np.bincount(cell, weights=y, minlength=I * J)
        means = ysum / K
        resid = y - means[cell]
        ssw = math.fsum((resid * resid).tolist()) if K > 1 else 0.0
        return cls(I, J, K, grid, means.reshape(I, J), float(ssw), fixed_effects)

    def with_treatment(self, treatment) -> "CellData":
        """Same outcomes under a different treatment grid."""
        return CellData(self.n_clusters, self.n_periods, self.cluster_period_size,
                        np.asarray(treatment, dtype=float), self.means, self.ssw, self.fixed_effects)

    def with_assignment(self, sequence_of_cluster) -> "CellData":
        seq = np.asarray(sequence_of_cluster, dtype=np.intp)
        return self.with_treatment(staircase(self.n_periods - 1)[seq])

    def is_rank_deficient(self) -> bool:
        X = self.cell_X()
        return np.linalg.matrix_rank(X.reshape(-1, X.shape[-1])) < self.n_params

    def cell_X(self) -> np.ndarray:
        """Unscaled ``I x J x P`` cell-level design."""
        return np.stack([self.cell_rows(t) for t in self.treatment])

    def stats(self):
        """Per-group ``(X, T, counts, ysum, ycross)`` on ``sqrt(K)``-scaled means."""
        rows = self.group_rows
        G = rows.shape[0]
        sk = math.sqrt(self.cluster_period_size)
        X = np.ascontiguousarray(np.stack([self.cell_rows(t) for t in rows]) * sk)
        ys = self.means * sk
        g = self.group_of_cluster
        counts = np.bincount(g, minlength=G).astype(float)
        ysum = np.zeros((G, self.n_periods))
        np.add.at(ysum, g, ys)
        ycross = np.zeros((G, self.n_periods, self.n_periods))
        np.add.at(ycross, g, ys[:, :, None] * ys[:, None, :])
        return X, np.ascontiguousarray(rows), counts, ysum, ycross


@dataclass(frozen=True)
class FitOptions:
    rhoend: float = 1e-6
    ftol: float = 1e-8
    maxfev: int = 500
    n_restarts: int = 3
    polish: bool = True
    start: tuple | None = None
    restart_seed: int = 20240


def _full_params(structure, p):
    full = [0.0, 0.0, 0.0, 0.0]
    for slot, value in zip(_SLOTS[structure], p):
        full[slot] = float(value)
    return full


def _to_vc(structure, full, s2):
    a2, g2, v2, r = full
    return VarianceComponents(
        tau_alpha_sq=a2 * s2, tau_gamma_sq=g2 * s2, tau_v_sq=v2 * s2,
        decay=r if structure.has_decay else 0.0, sigma_eps_sq=s2,
    )


class _Problem:
    """REML objective for one dataset and structure in a chosen parameterization."""

    def __init__(self, cells: CellData, structure: CovStructure):
        self.cells = cells
        self.structure = structure
        self.slots = _SLOTS[structure]
        self.ar1 = structure.has_decay
        self.K = float(cells.cluster_period_size)
        self.n_obs = float(cells.n_obs)
        self.X, self.T, self.counts, self.ysum, self.ycross = cells.stats()
        self.ssw = cells.ssw
        self._grad = np.zeros(4)
        self.nfev = 0

    def natural(self, full, grad=False):
        a2, g2, v2, r = full
        self.nfev += 1
        g = self._grad if grad else None
        f = kernels.reml_eval(a2, g2, v2, r, self.ar1, self.K, self.X, self.T, self.counts,
                              self.ysum, self.ycross, self.ssw, self.n_obs, g)
        if grad:
            return f, self._grad[list(self.slots)].copy()
        return f

    def from_x(self, x):
        """Optimizer coordinates: SD ratios for variances, ``r`` as is."""
        p = [xi * xi for xi in x]
        if self.ar1:
            p[-1] = x[-1]
        return p

    def to_x(self, p):
        x = [math.sqrt(max(v, 0.0)) for v in p]
        if self.ar1:
            x[-1] = p[-1]
        return np.array(x)

    def bounds(self):
        n = len(self.slots)
        lo = np.zeros(n)
        hi = np.full(n, THETA_MAX)
        if self.ar1:
            hi[-1] = R_MAX
        return lo, hi

    def objective(self, x):
        return self.natural(_full_params(self.structure, self.from_x(x)))


def reml_objective(cells: CellData, structure, params) -> float:
    """Profiled REML deviance at variance ratios ``params`` (structure order)."""
    structure = CovStructure.parse(structure)
    return _Problem(cells, structure).natural(_full_params(structure, params))


def _moment_start(cells: CellData, structure: CovStructure):
    """Rough variance ratios from the cell means via OLS residual moments."""
    X = cells.cell_X()
    I, J = cells.means.shape
    K = cells.cluster_period_size
    Xf = X.reshape(-1, X.shape[-1])
    beta, *_ = np.linalg.lstsq(Xf, cells.means.reshape(-1), rcond=None)
    E = (cells.means.reshape(-1) - Xf @ beta).reshape(I, J)
    if K > 1:
        s2 = cells.ssw / (cells.n_obs - I * J)
    else:
        s2 = max(float(np.mean(E * E)) * 0.5, 1e-8)
    S = E.T @ E / max(I - 1, 1)
    diag = float(np.mean(np.diag(S)))
    off = float((S.sum() - np.trace(S)) / (J * (J - 1))) if J > 1 else 0.0
    a2 = max(off, 0.0) / s2
    g2 = max(diag - off - s2 / K, 0.0) / s2
    t = cells.treatment.astype(bool)
    v2 = 0.0
    if t.any() and (~t).any():
        v2 = max(float(np.mean(E[t] ** 2) - np.mean(E[~t] ** 2)), 0.0) / s2
    floor = 0.01
    if structure is CovStructure.EXCH:
        return [max(a2 + g2 / J, floor)]
    if structure is CovStructure.NE:
        return [max(a2, floor), max(g2, floor)]
    if structure is CovStructure.NE_RI:
        return [max(a2, floor), max(g2, floor), max(v2, floor)]
    total = a2 + g2
    r = min(max(a2 / total, 0.1), 0.95) if total > 0 else 0.5
    return [max(total, floor), max(v2, floor), r]


def _polish(prob: _Problem, p, f, max_iter=8):
    """Projected Newton refinement on the natural parameters.

    Uses the analytic gradient and a central-difference Hessian of it.
    Variances at zero with an outward-pointing gradient, and ``r`` pinned at
    either bound, are held fixed.
    """
    n = len(p)
    p = np.array(p, dtype=float)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    if prob.ar1:
        hi[-1] = R_MAX
    structure = prob.structure
    for _ in range(max_iter):
        f0, g = prob.natural(_full_params(structure, p), grad=True)
        if not math.isfinite(f0):
            break
        snap_lo = (p <= 1e-6) & (g > 0)
        snap_hi = (p >= hi - 1e-9) & (g < 0)
        if snap_lo.any() or snap_hi.any():
            trial = p.copy()
            trial[snap_lo] = 0.0
            trial[snap_hi] = hi[snap_hi]
            ft = prob.natural(_full_params(structure, trial))
            if ft <= f0 + 1e-10:
                p, f0 = trial, ft
                f0, g = prob.natural(_full_params(structure, p), grad=True)
        free = ~(((p <= lo) & (g > 0)) | ((p >= hi) & (g < 0)))
        if not free.any() or np.max(np.abs(g[free])) < 1e-10:
            f = min(f, f0) if f0 <= f else f
            break
        H = np.zeros((n, n))
        for i in range(n):
            h = 1e-5 * max(1.0, abs(p[i]))
            up, dn = p.copy(), p.copy()
            up[i] = min(p[i] + h, hi[i])
            dn[i] = max(p[i] - h, lo[i])
            _, gu = prob.natural(_full_params(structure, up), grad=True)
            _, gd = prob.natural(_full_params(structure, dn), grad=True)
            H[:, i] = (gu - gd) / (up[i] - dn[i])
        H = 0.5 * (H + H.T)
        Hf = H[np.ix_(free, free)]
        w, Q = np.linalg.eigh(Hf)
        if w[0] <= 0:
            break
        step = np.zeros(n)
        step[free] = -(Q @ ((Q.T @ g[free]) / w))
        accepted = False
        t = 1.0
        for _ in range(6):
            trial = np.clip(p + t * step, lo, hi)
            ft = prob.natural(_full_params(structure, trial))
            if ft <= f0:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        moved = np.max(np.abs(trial - p))
        p, f = trial, ft
        if moved < 1e-12:
            break
    f_final = prob.natural(_full_params(structure, p))
    return p, f_final


def _optimize(prob: _Problem, start, options: FitOptions):
    lo, hi = prob.bounds()
    x0 = np.clip(prob.to_x(start), lo, hi)
    res = minimize_bounded(prob.objective, x0, lo, hi, rhobeg=0.1, rhoend=options.rhoend,
                           ftol=options.ftol, maxfev=options.maxfev)
    attempts = [res]
    if not res.success and options.n_restarts > 0:
        rng = np.random.default_rng(options.restart_seed)
        for _ in range(options.n_restarts):
            jitter = x0 * np.exp(rng.normal(0.0, 0.5, x0.size)) + rng.uniform(0, 0.05, x0.size)
            jitter = np.clip(jitter, lo, np.where(np.isfinite(hi), hi - 1e-3, hi))
            r2 = minimize_bounded(prob.objective, jitter, lo, hi, rhobeg=0.1,
                                  rhoend=options.rhoend, ftol=options.ftol, maxfev=options.maxfev)
            attempts.append(r2)
            if r2.success:
                break
    ok = [a for a in attempts if a.success]
    best = min(ok or attempts, key=lambda a: a.fun)
    nit = sum(a.nit for a in attempts)
    return best, bool(ok), nit


def profile_sigma(cells: CellData, structure, params) -> float:
    """Closed-form REML ``sigma_eps^2`` given variance ratios."""
    structure = CovStructure.parse(structure)
    state = _gls_state(cells, structure, _full_params(structure, params))
    return state["Q"] / (cells.n_obs - cells.n_params)


def _relative_cov(J, K, full, t):
    a2, g2, v2, r = full
    lag = np.abs(np.subtract.outer(np.arange(J), np.arange(J)))
    C = np.where(lag == 0, 1.0, r ** lag.astype(float)) if r > 0 else np.eye(J)
    return np.eye(J) + K * (a2 + g2 * C + v2 * np.outer(t, t))


def _gls_state(cells: CellData, structure: CovStructure, full):
    """GLS solution on scaled cell means at fixed variance ratios."""
    if not structure.has_decay:
        full = [full[0], full[1], full[2], 0.0]
    K = cells.cluster_period_size
    J = cells.n_periods
    sk = math.sqrt(K)
    rows = cells.group_rows
    Vt = np.stack([_relative_cov(J, K, full, t) for t in rows])
    W = np.linalg.inv(Vt)
    W = 0.5 * (W + W.transpose(0, 2, 1))
    g = cells.group_of_cluster
    Xs = np.stack([cells.cell_rows(t) for t in rows])[g] * sk
    ys = cells.means * sk
    Wc = W[g]
    WX = Wc @ Xs
    A = np.einsum("ijp,ijq->pq", Xs, WX)
    b = np.einsum("ijp,ij->p", WX, ys)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise SingularDesign("X' V^-1 X is not positive definite") from None
    if np.min(np.diag(L)) ** 2 < 1e-12 * np.max(np.diag(A)):
        raise SingularDesign("X' V^-1 X is numerically singular")
    Ainv = np.linalg.inv(A)
    Ainv = 0.5 * (Ainv + Ainv.T)
    beta = Ainv @ b
    resid = ys - np.einsum("ijp,p->ij", Xs, beta)
    Q = float(np.einsum("ij,ijl,il->", resid, Wc, resid)) + cells.ssw
    return {"Vt": Vt, "W": W, "X": Xs, "y": ys, "A": A, "Ainv": Ainv, "beta": beta,
            "resid": resid, "Q": Q}


@dataclass(frozen=True)
class FitResult:
    """Outcome of a REML fit.

    ``theta`` holds the variance ratios (over ``sigma_eps^2``) in the
    structure's parameter order, with ``r`` last for the decay model.
    ``status`` is ``"ok"``, ``"boundary"`` or an optimizer failure code;
    boundary fits are converged.
    """

    structure: CovStructure
    cells: CellData = field(repr=False)
    beta_hat: np.ndarray
    model_vcov: np.ndarray = field(repr=False)
    vc_hat: VarianceComponents
    theta: tuple
    sigma_sq: float
    reml_loglik: float
    deviance: float
    converged: bool
    status: str
    boundary: bool
    n_iterations: int
    nfev: int
    _state: dict = field(repr=False, compare=False, default=None)

    @property
    def treatment_effect(self) -> float:
        return float(self.beta_hat[-1])

    @property
    def n_clusters(self) -> int:
        return self.cells.n_clusters

    @property
    def n_params(self) -> int:
        return self.cells.n_params

    @property
    def n_obs(self) -> int:
        return self.cells.n_obs

    def reduced(self):
        """Per-cluster scaled blocks ``(X I x J x P, resid I x J, Vt I x J x J, W, Ainv)``.

        ``Ainv`` is ``(X'V^-1 X)^-1 / sigma^2``; the sandwich estimators are
        invariant to the common ``sigma^2`` so it never enters them.
        """
        s = self._state
        g = self.cells.group_of_cluster
        return s["X"], s["resid"], s["Vt"][g], s["W"][g], s["Ainv"]

    def cluster_matrices(self, cluster: int):
        """Dense ``(X_i, V_i, r_i)`` for one cluster in period-major row order.

        Residuals need the raw outcomes, so ``r_i`` is the cell-mean part only
        (within-cell deviations are orthogonal to every sandwich term).
        """
        cells = self.cells
        K = cells.cluster_period_size
        Xc = cells.cell_rows(cells.treatment[cluster])
        Xi = np.repeat(Xc, K, axis=0)
        Vt = self._state["Vt"][cells.group_of_cluster[cluster]]
        J = cells.n_periods
        cells_cov = (Vt - np.eye(J)) / K
        Vi = self.sigma_sq * (np.kron(cells_cov, np.ones((K, K))) + np.eye(J * K))
        ri = np.repeat(self._state["resid"][cluster] / math.sqrt(K), K)
        return Xi, Vi, ri

    def v_inverse(self, cluster: int):
        """``(V_i^-1, log|V_i|)`` through the random-effects factorization."""
        cells = self.cells
        d = _pseudo_design(cells)
        Z, R = build_Z_R(d, cluster, self.structure, self.vc_hat)
        return woodbury_inverse(Z, R, self.vc_hat.sigma_eps_sq)

    def to_dict(self) -> dict:
        return {
            "structure": self.structure.value,
            "beta_hat": self.beta_hat.tolist(),
            "vc_hat": self.vc_hat.to_dict(),
            "model_vcov": self.model_vcov.tolist(),
            "converged": self.converged,
            "status": self.status,
            "boundary": self.boundary,
            "loglik": self.reml_loglik,
            "n_iterations": self.n_iterations,
            "nfev": self.nfev,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _pseudo_design(cells: CellData) -> TrialDesign:
    """A TrialDesign view of the cells' treatment grid (sequence map is nominal)."""
    seq = np.zeros(cells.n_clusters, dtype=np.intp)
    treat = cells.treatment.astype(np.int8)
    return TrialDesign(cells.n_clusters, max(cells.n_periods - 1, 1), cells.n_periods,
                       cells.cluster_period_size, seq, treat)


def _make_result(cells, structure, p, f, converged, status, nit, nfev):
    full = _full_params(structure, p)
    state = _gls_state(cells, structure, full)
    dof = cells.n_obs - cells.n_params
    s2 = state["Q"] / dof
    boundary = any(v <= 0.0 for v, slot in zip(p, _SLOTS[structure]) if slot < 3)
    if structure.has_decay and (p[-1] <= 0.0 or p[-1] >= R_MAX):
        boundary = True
    if converged and boundary and status == "ok":
        status = "boundary"
    loglik = -0.5 * (f + dof * (1.0 + math.log(2.0 * math.pi)))
    return FitResult(
        structure=structure,
        cells=cells,
        beta_hat=state["beta"],
        model_vcov=s2 * state["Ainv"],
        vc_hat=_to_vc(structure, full, s2),
        theta=tuple(float(v) for v in p),
        sigma_sq=s2,
        reml_loglik=loglik,
        deviance=f,
        converged=converged,
        status=status,
        boundary=boundary,
        n_iterations=nit,
        nfev=nfev,
        _state=state,
    )


def reml_fit(data, design: TrialDesign | None = None, structure="EXCH",
             options: FitOptions | None = None, *, raise_on_failure: bool = False) -> FitResult:
    """Fit the working model by restricted maximum likelihood.

    ``data`` is a :class:`Dataset` or prebuilt :class:`CellData`.  A failed
    optimization returns a fit with ``converged=False`` (or raises
    :class:`NonConvergence` when ``raise_on_failure``).
    """
    structure = CovStructure.parse(structure)
    options = options or FitOptions()
    cells = data if isinstance(data, CellData) else CellData.from_dataset(data, design)
    if cells.n_obs <= cells.n_params:
        raise SingularDesign("not enough observations for the fixed effects")
    if cells.is_rank_deficient():
        raise SingularDesign("fixed-effects design is rank deficient")
    prob = _Problem(cells, structure)
    start = list(options.start) if options.start is not None else _moment_start(cells, structure)
    if len(start) != len(prob.slots):
        raise InvalidSpec(f"{structure.value} takes {len(prob.slots)} start values")
    f_start = prob.natural(_full_params(structure, start))
    if not math.isfinite(f_start):
        start = [0.05] * len(prob.slots)
        if structure.has_decay:
            start[-1] = 0.5
    best, ok, nit = _optimize(prob, start, options)
    p = prob.from_x(best.x)
    f = best.fun
    if ok and options.polish:
        p, f = _polish(prob, p, f)
    if ok and math.isfinite(f):
        status = "ok"
    else:
        status = best.status if best.status != "converged" else "nonfinite"
        ok = False
    if not math.isfinite(f):
        if raise_on_failure:
            raise NonConvergence("REML objective is not finite at any visited point")
        p = start
        f = prob.natural(_full_params(structure, p))
    if not ok and raise_on_failure:
        raise NonConvergence(f"REML optimization failed: {best.message}")
    return _make_result(cells, structure, list(p), f, ok, status, nit, prob.nfev)


def refit(fit: FitResult, cells: CellData, options: FitOptions | None = None) -> FitResult:
    """Refit ``fit``'s structure on new cells, starting from its estimates."""
    options = replace(options or FitOptions(), start=fit.theta)
    return reml_fit(cells, structure=fit.structure, options=options)


def gls(X_blocks, Vinv_blocks, y_blocks):
    """Dense generalized least squares over clusters.

    Returns ``(beta_hat, (X'V^-1 X)^-1)``.
    """
    P = X_blocks[0].shape[1]
    A = np.zeros((P, P))
    b = np.zeros(P)
    for X, Vinv, y in zip(X_blocks, Vinv_blocks, y_blocks):
        VX = Vinv @ X
        A += X.T @ VX
        b += VX.T @ y
    A = 0.5 * (A + A.T)
    w = np.linalg.eigvalsh(A)
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        raise SingularDesign("X' V^-1 X is singular")
    vcov = np.linalg.inv(A)
    vcov = 0.5 * (vcov + vcov.T)
    return np.linalg.solve(A, b), vcov
