"""Pure numpy profiled-REML kernel; the reference the compiled kernel must match.

Everything is expressed on cluster-period means scaled by ``sqrt(K)``. Clusters
sharing a treatment pattern (a "group") share their scaled design ``X_g`` and
relative covariance ``Vt_g = I + K (a2 11' + g2 C + v2 t t')``, so the
objective only needs per-group counts, sums ``ysum_g`` and cross-products
``ycross_g`` of the scaled means, plus the pooled within-cell sum of squares.

The returned value is the profiled REML deviance without constants::

    f = (N - P) log(Q / (N - P)) + sum_g n_g log|Vt_g| + log|A|

with ``A = sum_g n_g X_g' Vt_g^-1 X_g`` and ``Q`` the generalized residual
sum of squares including the within-cell part.  The gradient is with respect
to ``(a2, g2, v2, r)``.
"""
from __future__ import annotations

import numpy as np


def _corr(J: int, r: float, ar1: bool):
    lag = np.abs(np.subtract.outer(np.arange(J), np.arange(J)))
    if not ar1:
        return np.eye(J), None
    C = np.where(lag > 0, r ** np.maximum(lag, 1), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dC = np.where(lag > 0, lag * r ** np.maximum(lag - 1, 0), 0.0)
    return C, dC


def reml_eval(a2, g2, v2, r, ar1, K, X, T, counts, ysum, ycross, ssw, n_obs, grad=None):
    G, J, P = X.shape
    C, dC = _corr(J, r, ar1)
    V = K * (a2 + g2 * C + v2 * T[:, :, None] * T[:, None, :])
    V[:, np.arange(J), np.arange(J)] += 1.0
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        return np.inf
    logdetV = 2.0 * np.sum(counts * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1))
    W = np.linalg.inv(V)
    WX = W @ X
    A = np.einsum("g,gjp,gjq->pq", counts, X, WX)
    b = np.einsum("gjp,gj->p", WX, ysum)
    yWy = np.einsum("gjl,gjl->", W, ycross)
    try:
        LA = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.inf
    logdetA = 2.0 * np.log(np.diag(LA)).sum()
    beta = np.linalg.solve(A, b)
    Q = yWy - b @ beta + ssw
    if not Q > 0.0:
        return np.inf
    f = (n_obs - P) * np.log(Q / (n_obs - P)) + logdetV + logdetA
    if grad is not None:
        Ainv = np.linalg.inv(A)
        c = (n_obs - P) / Q
        mu = X @ beta
        R = (ycross - ysum[:, :, None] * mu[:, None, :] - mu[:, :, None] * ysum[:, None, :]
             + counts[:, None, None] * mu[:, :, None] * mu[:, None, :])
        E = (counts[:, None, None] * (W - WX @ Ainv @ WX.transpose(0, 2, 1))
             - c * W @ R @ W)
        grad[0] = K * E.sum()
        grad[1] = K * np.einsum("gjl,jl->", E, C)
        grad[2] = K * np.einsum("gjl,gj,gl->", E, T, T)
        grad[3] = K * g2 * np.einsum("gjl,jl->", E, dC) if ar1 else 0.0
    return float(f)
