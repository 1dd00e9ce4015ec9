"""Bound-constrained derivative-free trust-region minimization by quadratic interpolation.

A full quadratic is interpolated through ``(n+1)(n+2)/2`` points around the
incumbent and minimized exactly over the intersection of the bounds with an
infinity-norm trust region.  Points entering the set replace the one whose
Lagrange polynomial is largest at the newcomer (weighted by distance), and
when the set drifts away from the current region a geometry point is placed
where the departing point's Lagrange polynomial is largest in magnitude.
Aimed at the handful of variance parameters of a mixed model, where the
``3**n`` face enumeration of the box subproblem is cheap.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

__all__ = ["OptimizeResult", "minimize_bounded", "solve_box_qp"]


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    nfev: int
    nit: int
    success: bool
    status: str
    message: str


_FACES: dict = {}


def _faces(n):
    if n not in _FACES:
        _FACES[n] = [np.array(f) for f in itertools.product((-1, 0, 1), repeat=n)]
    return _FACES[n]


def solve_box_qp(g, H, lb, ub):
    """Global minimizer of ``g'd + d'Hd/2`` over ``lb <= d <= ub`` (compiled when available)."""
    from . import kernels

    return kernels.box_qp(g, H, lb, ub)


def _solve_box_qp_py(g, H, lb, ub):
    """Global minimizer of ``g'd + d'Hd/2`` over the box ``lb <= d <= ub``.

    Enumerates every face of the box and keeps the best stationary point of
    the quadratic restricted to each face's relative interior.  ``H`` need
    not be definite.
    """
    n = g.shape[0]
    if n == 1:
        g0, h0, lo, hi = float(g[0]), float(H[0, 0]), float(lb[0]), float(ub[0])
        cands = [lo, hi]
        if h0 > 0.0:
            d = -g0 / h0
            if lo < d < hi:
                cands.append(d)
        return np.array([min(cands, key=lambda d: g0 * d + 0.5 * h0 * d * d)])
    best_d, best_val = None, math.inf
    for face in _faces(n):
        d = np.where(face < 0, lb, np.where(face > 0, ub, 0.0))
        free = face == 0
        if free.any():
            fixed = ~free
            rhs = -(g[free] + H[np.ix_(free, fixed)] @ d[fixed])
            try:
                sol = np.linalg.solve(H[np.ix_(free, free)], rhs)
            except np.linalg.LinAlgError:
                continue
            if np.any(sol <= lb[free]) or np.any(sol >= ub[free]):
                continue
            d[free] = sol
        val = g @ d + 0.5 * d @ H @ d
        if val < best_val:
            best_val, best_d = val, d
    return best_d if best_d is not None else np.clip(-g, lb, ub)


class _Basis:
    """Monomials ``1, d_i, d_i^2/2, d_i d_j (i<j)``."""

    def __init__(self, n):
        self.n = n
        self.iu, self.ju = np.triu_indices(n, 1)
        self.size = (n + 1) * (n + 2) // 2

    def __call__(self, D):
        D = np.atleast_2d(D)
        return np.hstack([np.ones((D.shape[0], 1)), D, 0.5 * D * D, D[:, self.iu] * D[:, self.ju]])

    def quadratic(self, coef):
        """``(constant, gradient, Hessian)`` of the polynomial with coefficients ``coef``."""
        n = self.n
        g = coef[1 : n + 1]
        H = np.diag(coef[n + 1 : 2 * n + 1])
        off = coef[2 * n + 1 :]
        H[self.iu, self.ju] = off
        H[self.ju, self.iu] = off
        return coef[0], g, H


def _initial_offsets(x0, lo, hi, delta):
    """BOBYQA-like stencil: ``x0``, two points per axis, one per coordinate pair."""
    n = x0.size
    offsets = [np.zeros(n)]
    first = np.empty(n)
    for i in range(n):
        if x0[i] + delta <= hi[i]:
            a = delta
            b = -delta if x0[i] - delta >= lo[i] else 2 * delta
        else:
            a = -delta
            b = -2 * delta
        first[i] = a
        for step in (a, b):
            e = np.zeros(n)
            e[i] = step
            offsets.append(e)
    for i, j in itertools.combinations(range(n), 2):
        e = np.zeros(n)
        e[i] = first[i]
        e[j] = first[j]
        offsets.append(e)
    return offsets


_MESSAGES = {
    0: ("converged", "trust radius below tolerance"),
    1: ("converged", "objective and parameter change below tolerance"),
    2: ("maxfev", "evaluation budget exhausted"),
    3: ("nonfinite", "objective not finite at the start point"),
}


def minimize_bounded(
    fun,
    x0,
    lower,
    upper,
    *,
    rhobeg: float | None = None,
    rhoend: float = 1e-6,
    ftol: float = 1e-8,
    maxfev: int = 500,
) -> OptimizeResult:
    """Minimize ``fun`` over ``lower <= x <= upper`` without derivatives.

    Converges when the trust radius falls below ``rhoend``, or when an
    accepted step moves less than ``rhoend`` and lowers the objective by
    less than ``ftol``.  Exhausting ``maxfev`` evaluations is a failure.
    The loop runs compiled when the extension is available.
    """
    from . import kernels

    lo = np.ascontiguousarray(lower, dtype=float)
    hi = np.ascontiguousarray(upper, dtype=float)
    x0 = np.clip(np.asarray(x0, dtype=float), lo, hi)
    span = hi - lo
    if np.any(span <= 0):
        raise ValueError("every upper bound must exceed its lower bound")
    delta = rhobeg if rhobeg is not None else 0.1 * max(1.0, float(np.max(np.abs(x0))))
    delta = min(delta, 0.25 * float(np.min(span)))
    x, f, nfev, nit, code = kernels.tr_minimize(fun, x0, lo, hi, float(delta), float(rhoend),
                                                float(ftol), int(maxfev))
    status, message = _MESSAGES[code]
    return OptimizeResult(np.asarray(x, dtype=float), float(f), int(nfev), int(nit),
                          status == "converged", status, message)


def _minimize_py(fun, x0, lo, hi, delta, rhoend, ftol, maxfev):
    """Numpy trust-region loop; returns ``(x, f, nfev, nit, code)`` like the compiled one."""
    n = x0.size
    delta_max = 0.5 * float(np.max(hi - lo))
    basis = _Basis(n)
    nfev = 0

    def evaluate(x):
        nonlocal nfev
        nfev += 1
        f = float(fun(x))
        return f if math.isfinite(f) else math.inf

    def finish(code, nit):
        k = int(np.argmin(F))
        return Y[k].copy(), float(F[k]), nfev, nit, code

    Y = np.array([np.clip(x0 + off, lo, hi) for off in _initial_offsets(x0, lo, hi, delta)])
    F = np.empty(len(Y))
    for i, y in enumerate(Y):
        F[i] = evaluate(y)
    if not math.isfinite(F[0]):
        return finish(3, 0)

    nit = 0
    while True:
        if nfev >= maxfev:
            return finish(2, nit)
        if delta < rhoend:
            return finish(0, nit)
        nit += 1
        k = int(np.argmin(F))
        c, fc = Y[k].copy(), F[k]
        D = (Y - c) / delta
        dist = np.max(np.abs(D), axis=1)
        Phi = basis(D)
        finite = np.isfinite(F)
        try:
            L = np.linalg.inv(Phi)  # column j: Lagrange polynomial of point j
            cond_ok = bool(np.all(np.isfinite(L))) and np.linalg.norm(Phi, 1) * np.linalg.norm(L, 1) < 1e12
        except np.linalg.LinAlgError:
            cond_ok = False
        lb = np.maximum(lo - c, -delta) / delta
        ub = np.minimum(hi - c, delta) / delta

        if not cond_ok or not finite.all():
            # rebuild the interpolation set around the incumbent
            fresh = _initial_offsets(c, lo, hi, delta)[1:]
            others = [i for i in range(len(Y)) if i != k]
            for i, off in zip(others, fresh):
                Y[i] = np.clip(c + off, lo, hi)
                F[i] = evaluate(Y[i])
            continue

        coef = L @ (F - fc)
        _, g, H = basis.quadratic(coef)
        d = solve_box_qp(g, H, lb, ub)
        pred = -(g @ d + 0.5 * d @ H @ d)
        valid = bool(np.all(dist <= 2.0 + 1e-12))

        if pred <= 1e-13 * max(1.0, abs(fc)) or np.max(np.abs(d)) < 1e-3 * rhoend / delta:
            if valid:
                delta *= 0.1 if np.max(np.abs(d)) < 0.1 else 0.5
            else:
                _geometry_step(basis, L, Y, F, dist, k, c, delta, lb, ub, evaluate)
            continue

        x_new = np.clip(c + d * delta, lo, hi)
        f_new = evaluate(x_new)
        snorm = float(np.max(np.abs(x_new - c)))
        ratio = (fc - f_new) / pred if math.isfinite(f_new) else -math.inf

        # choose which point the newcomer replaces
        ell = np.abs(basis((x_new - c) / delta)[0] @ L)
        weight = ell * np.maximum(1.0, dist / 1.0) ** 3
        if f_new >= fc:
            weight[k] = 0.0
        j = int(np.argmax(weight))
        if f_new < fc or weight[j] > 1.0:
            Y[j], F[j] = x_new, f_new

        if f_new < fc and (fc - f_new) < ftol and snorm < rhoend and valid and pred < ftol:
            return finish(1, nit)

        if ratio >= 0.75 and snorm >= 0.99 * delta:
            delta = min(2.0 * delta, delta_max)
        elif ratio >= 0.1:
            if snorm < 0.5 * delta:
                delta = max(0.5 * delta, 2.0 * snorm)
        elif valid:
            delta = 0.5 * delta if snorm > 0.1 * delta else max(0.1 * delta, snorm)
        else:
            _geometry_step(basis, L, Y, F, dist, k, c, delta, lb, ub, evaluate)


def _geometry_step(basis, L, Y, F, dist, k, c, delta, lb, ub, evaluate):
    """Replace the farthest point by the maximizer of its Lagrange polynomial in the region."""
    far = dist.copy()
    far[k] = -1.0
    j = int(np.argmax(far))
    const, g, H = basis.quadratic(L[:, j])
    best_d, best_val = None, -1.0
    for sign in (1.0, -1.0):
        d = solve_box_qp(-sign * g, -sign * H, lb, ub)
        val = abs(const + g @ d + 0.5 * d @ H @ d)
        if val > best_val:
            best_val, best_d = val, d
    x = c + best_d * delta
    Y[j] = x
    F[j] = evaluate(x)
