"""Brute-force references for the test suite.

Everything here works on the long-format data with dense per-cluster
matrices built straight from the model definition.  Nothing is imported
from the package's linear algebra, so agreement is evidence rather than
tautology.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


@dataclass(frozen=True)
class OracleReport:
    quantity: str
    library: float
    oracle: float
    abs_err: float
    rel_err: float
    tol: float
    passed: bool

    def __str__(self):
        flag = "ok" if self.passed else "MISMATCH"
        return (f"{self.quantity}: library={self.library:.12g} oracle={self.oracle:.12g} "
                f"abs={self.abs_err:.2e} rel={self.rel_err:.2e} tol={self.tol:.1e} {flag}")


def compare(quantity, library, oracle, tol, relative=False) -> OracleReport:
    lib = np.asarray(library, dtype=float)
    ora = np.asarray(oracle, dtype=float)
    abs_err = float(np.max(np.abs(lib - ora))) if lib.size else 0.0
    scale = float(np.max(np.abs(ora))) if ora.size else 0.0
    rel_err = abs_err / scale if scale > 0 else abs_err
    err = rel_err if relative else abs_err
    return OracleReport(quantity, float(lib.flat[-1]), float(ora.flat[-1]), abs_err, rel_err, tol,
                        bool(err <= tol))


# ---- dense model pieces ----

def cluster_blocks(data):
    """Per-cluster ``(X_i, y_i, period_i, treated_i)`` with period-then-individual row order."""
    J = int(data.period.max())
    out = []
    for c in range(int(data.cluster.max()) + 1):
        idx = np.flatnonzero(data.cluster == c)
        idx = idx[np.lexsort((data.individual[idx], data.period[idx]))]
        per = data.period[idx].astype(int)
        trt = data.treated[idx].astype(float)
        X = np.zeros((idx.size, J + 1))
        X[:, 0] = 1.0
        for j in range(2, J + 1):
            X[:, j - 1] = per == j
        X[:, J] = trt
        out.append((X, data.y[idx].astype(float), per, trt))
    return out


def dense_V(period, treated, structure, vc):
    """Marginal covariance of one cluster written entry by entry from the model definition."""
    n = len(period)
    V = np.empty((n, n))
    for a in range(n):
        for b in range(n):
            v = vc.tau_alpha_sq + vc.tau_v_sq * treated[a] * treated[b]
            if structure == "DTD_RI":
                v += vc.tau_gamma_sq * vc.decay ** abs(int(period[a]) - int(period[b]))
            elif period[a] == period[b]:
                v += vc.tau_gamma_sq
            if a == b:
                v += vc.sigma_eps_sq
            V[a, b] = v
    return V


def dense_gls(Xs, Vs, ys):
    """GLS on the fully stacked block-diagonal system; returns ``(beta, G)``."""
    X = np.vstack(Xs)
    y = np.concatenate(ys)
    Vinv = np.linalg.inv(sla.block_diag(*Vs))
    G = np.linalg.inv(X.T @ Vinv @ X)
    return G @ (X.T @ Vinv @ y), G


def _inv_sqrt_psd(M):
    R = sla.sqrtm(M)
    return np.real(np.linalg.inv(R))


def dense_sandwich(Xs, Vs, ys, rule="CR0"):
    """Literal bread-meat-bread with per-cluster adjustments ``A_i``.

    ``rule`` is ``CR0`` (identity), ``CR2`` (``A_i = V^{1/2} M^{-1/2} V^{-1/2}``)
    or ``CR3`` (``(I - X_i G X_i' V_i^{-1})^{-1}``), or a callable
    ``(X_i, V_i, G) -> A_i``.
    """
    beta, G = dense_gls(Xs, Vs, ys)
    meat = np.zeros_like(G)
    for X, V, y in zip(Xs, Vs, ys):
        r = y - X @ beta
        Vinv = np.linalg.inv(V)
        n = len(y)
        if callable(rule):
            A = rule(X, V, G)
        elif rule == "CR0":
            A = np.eye(n)
        elif rule == "CR3":
            A = np.linalg.inv(np.eye(n) - X @ G @ X.T @ Vinv)
        elif rule == "CR2":
            S = np.real(sla.sqrtm(V))
            Sinv = np.linalg.inv(S)
            M = Sinv @ (V - X @ G @ X.T) @ Sinv
            A = S @ _inv_sqrt_psd(0.5 * (M + M.T)) @ Sinv
        else:
            raise ValueError(rule)
        u = X.T @ Vinv @ A @ r
        meat += np.outer(u, u)
    out = G @ meat @ G
    return 0.5 * (out + out.T)


def dense_reml_loglik(data, structure, vc) -> float:
    """Restricted log-likelihood from the stacked dense covariance."""
    blocks = cluster_blocks(data)
    Xs = [b[0] for b in blocks]
    ys = [b[1] for b in blocks]
    Vs = [dense_V(b[2], b[3], structure, vc) for b in blocks]
    X = np.vstack(Xs)
    y = np.concatenate(ys)
    V = sla.block_diag(*Vs)
    N, P = X.shape
    _, logdetV = np.linalg.slogdet(V)
    Vinv = np.linalg.inv(V)
    XtVX = X.T @ Vinv @ X
    _, logdetA = np.linalg.slogdet(XtVX)
    beta = np.linalg.solve(XtVX, X.T @ Vinv @ y)
    r = y - X @ beta
    return -0.5 * (logdetV + logdetA + r @ Vinv @ r + (N - P) * math.log(2 * math.pi))


def reml_grid_exch(data, tau_grid, sigma_grid):
    """Exhaustive grid search of the EXCH restricted likelihood over ``(tau_alpha^2, sigma^2)``."""
    from swrve.covariance import VarianceComponents

    best = (-math.inf, None, None)
    for t in tau_grid:
        for s in sigma_grid:
            ll = dense_reml_loglik(data, "EXCH", VarianceComponents(tau_alpha_sq=t, sigma_eps_sq=s))
            if ll > best[0]:
                best = (ll, t, s)
    return best


def anova_reml_oneway(y_groups):
    """Closed-form balanced one-way REML: ``((MSB - MSW)/n, MSW)`` truncated at zero."""
    y = np.asarray(y_groups, dtype=float)
    a, n = y.shape
    means = y.mean(axis=1)
    grand = y.mean()
    msb = n * np.sum((means - grand) ** 2) / (a - 1)
    msw = np.sum((y - means[:, None]) ** 2) / (a * (n - 1))
    tau = (msb - msw) / n
    if tau < 0:
        # boundary: pooled variance over all observations with one mean
        return 0.0, float(np.sum((y - grand) ** 2) / (a * n - 1))
    return float(tau), float(msw)


def jackknife_vcov(Xs, Vs, ys):
    """Leave-one-cluster-out GLS at fixed covariance: ``(I-1)/I * sum (b_(i) - b_bar)(...)'``."""
    I = len(Xs)
    betas = []
    for i in range(I):
        keep = [k for k in range(I) if k != i]
        b, _ = dense_gls([Xs[k] for k in keep], [Vs[k] for k in keep], [ys[k] for k in keep])
        betas.append(b)
    B = np.array(betas)
    D = B - B.mean(axis=0)
    return (I - 1) / I * D.T @ D, B


def sample_icc(data):
    """Moment estimates of control-arm within- and between-period ICCs.

    Residuals are taken about period-by-arm means; within-period covariance
    comes from distinct pairs inside a cell, between-period covariance from
    products of cell-mean residuals at different periods of one cluster.
    """
    e = data.y.astype(float).copy()
    for p in np.unique(data.period):
        for t in (0, 1):
            m = (data.period == p) & (data.treated == t)
            if m.any():
                e[m] -= e[m].mean()
    ctrl = data.treated == 0
    var = float(np.mean(e[ctrl] ** 2))
    within_num, within_den = 0.0, 0
    cell_means = {}
    for c in np.unique(data.cluster[ctrl]):
        for p in np.unique(data.period[ctrl & (data.cluster == c)]):
            m = ctrl & (data.cluster == c) & (data.period == p)
            v = e[m]
            k = v.size
            within_num += v.sum() ** 2 - np.sum(v * v)
            within_den += k * (k - 1)
            cell_means[(c, p)] = v.mean()
    cov_w = within_num / within_den
    between = []
    for (c, p), m1 in cell_means.items():
        for (c2, p2), m2 in cell_means.items():
            if c == c2 and p < p2:
                between.append(m1 * m2)
    cov_b = float(np.mean(between)) if between else math.nan
    return {"wpicc_control": cov_w / var, "bpicc_control": cov_b / var}


def relabel_treatment(data, perm):
    """Dataset whose cluster ``c`` takes the treatment row cluster ``perm[c]`` had."""
    from swrve.datagen import Dataset

    J = int(data.period.max())
    I = int(data.cluster.max()) + 1
    grid = np.zeros((I, J), dtype=np.int8)
    grid[data.cluster, data.period - 1] = data.treated
    treated = grid[np.asarray(perm)[data.cluster], data.period - 1]
    return Dataset(data.cluster, data.period, data.individual, treated.astype(np.int8), data.y)


def all_assignments(n_clusters):
    return [list(p) for p in itertools.permutations(range(n_clusters))]
