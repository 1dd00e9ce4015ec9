# cython: language_level=3
"""Compiled profiled-REML kernel over per-group sufficient statistics.

Mirrors :func:`swrve._core_py.reml_eval`; see that module for the algebra.
All small dense factorizations are done in place on malloc'd buffers so the
call can run without the GIL.
"""
from libc.math cimport log, sqrt, pow, fabs, isfinite, INFINITY
import numpy as np
from libc.stdlib cimport malloc, free
from libc.string cimport memset


cdef int _chol(double* a, int n) noexcept nogil:
    cdef int i, j, k
    cdef double s, t
    for j in range(n):
        s = a[j * n + j]
        for k in range(j):
            s -= a[j * n + k] * a[j * n + k]
        if s <= 0.0:
            return -1
        s = sqrt(s)
        a[j * n + j] = s
        for i in range(j + 1, n):
            t = a[i * n + j]
            for k in range(j):
                t -= a[i * n + k] * a[j * n + k]
            a[i * n + j] = t / s
    return 0


cdef void _chol_solve(const double* L, double* b, int n) noexcept nogil:
    cdef int i, k
    cdef double t
    for i in range(n):
        t = b[i]
        for k in range(i):
            t -= L[i * n + k] * b[k]
        b[i] = t / L[i * n + i]
    for i in range(n - 1, -1, -1):
        t = b[i]
        for k in range(i + 1, n):
            t -= L[k * n + i] * b[k]
        b[i] = t / L[i * n + i]


cdef void _chol_inv(const double* L, double* out, double* col, int n) noexcept nogil:
    cdef int i, j
    for j in range(n):
        for i in range(n):
            col[i] = 1.0 if i == j else 0.0
        _chol_solve(L, col, n)
        for i in range(n):
            out[i * n + j] = col[i]


cdef double _logdet(const double* L, int n) noexcept nogil:
    cdef int i
    cdef double s = 0.0
    for i in range(n):
        s += log(L[i * n + i])
    return 2.0 * s


def reml_eval(double a2, double g2, double v2, double r, bint ar1, double K,
              const double[:, :, ::1] X, const double[:, ::1] T, const double[::1] counts,
              const double[:, ::1] ysum, const double[:, :, ::1] ycross,
              double ssw, double n_obs, double[::1] grad=None):
    cdef int G = X.shape[0]
    cdef int J = X.shape[1]
    cdef int P = X.shape[2]
    cdef bint want_grad = grad is not None
    cdef double f = INFINITY
    cdef double* V = <double*> malloc(J * J * sizeof(double))
    cdef double* W = <double*> malloc(G * J * J * sizeof(double))
    cdef double* WX = <double*> malloc(G * J * P * sizeof(double))
    cdef double* A = <double*> malloc(P * P * sizeof(double))
    cdef double* Ainv = <double*> malloc(P * P * sizeof(double))
    cdef double* b = <double*> malloc(P * sizeof(double))
    cdef double* col = <double*> malloc((J + P) * sizeof(double))
    cdef double* mu = <double*> malloc(J * sizeof(double))
    cdef double* R = <double*> malloc(J * J * sizeof(double))
    cdef double* WR = <double*> malloc(J * J * sizeof(double))
    cdef double* XA = <double*> malloc(J * P * sizeof(double))
    cdef int g, j, l, p, q, lag
    cdef double corr, dcorr, s, n_g, logdetV = 0.0, yWy = 0.0, Q, logdetA, c, e
    cdef double ga = 0.0, gg = 0.0, gv = 0.0, gr = 0.0
    cdef double* Wg
    cdef double* WXg
    cdef int fail = 0
    if (V == NULL or W == NULL or WX == NULL or A == NULL or Ainv == NULL or b == NULL
            or col == NULL or mu == NULL or R == NULL or WR == NULL or XA == NULL):
        free(V); free(W); free(WX); free(A); free(Ainv); free(b); free(col)
        free(mu); free(R); free(WR); free(XA)
        raise MemoryError()
    with nogil:
        memset(A, 0, P * P * sizeof(double))
        memset(b, 0, P * sizeof(double))
        for g in range(G):
            n_g = counts[g]
            for j in range(J):
                for l in range(J):
                    if ar1:
                        lag = j - l if j >= l else l - j
                        corr = pow(r, lag) if lag > 0 else 1.0
                    else:
                        corr = 1.0 if j == l else 0.0
                    V[j * J + l] = K * (a2 + g2 * corr + v2 * T[g, j] * T[g, l])
                V[j * J + j] += 1.0
            if _chol(V, J) != 0:
                fail = 1
                break
            logdetV += n_g * _logdet(V, J)
            Wg = W + g * J * J
            _chol_inv(V, Wg, col, J)
            WXg = WX + g * J * P
            for j in range(J):
                for p in range(P):
                    s = 0.0
                    for l in range(J):
                        s += Wg[j * J + l] * X[g, l, p]
                    WXg[j * P + p] = s
            for p in range(P):
                for q in range(P):
                    s = 0.0
                    for j in range(J):
                        s += X[g, j, p] * WXg[j * P + q]
                    A[p * P + q] += n_g * s
                s = 0.0
                for j in range(J):
                    s += WXg[j * P + p] * ysum[g, j]
                b[p] += s
            for j in range(J):
                for l in range(J):
                    yWy += Wg[j * J + l] * ycross[g, j, l]
        if not fail:
            if _chol(A, P) != 0:
                fail = 1
        if not fail:
            logdetA = _logdet(A, P)
            for p in range(P):
                col[p] = b[p]
            _chol_solve(A, col, P)
            s = 0.0
            for p in range(P):
                s += b[p] * col[p]
            Q = yWy - s + ssw
            if Q <= 0.0:
                fail = 1
        if not fail:
            f = (n_obs - P) * log(Q / (n_obs - P)) + logdetV + logdetA
        if not fail and want_grad:
            # col[0:P] still holds beta
            for p in range(P):
                b[p] = col[p]
            _chol_inv(A, Ainv, col, P)
            c = (n_obs - P) / Q
            for g in range(G):
                n_g = counts[g]
                Wg = W + g * J * J
                WXg = WX + g * J * P
                for j in range(J):
                    s = 0.0
                    for p in range(P):
                        s += X[g, j, p] * b[p]
                    mu[j] = s
                for j in range(J):
                    for l in range(J):
                        R[j * J + l] = (ycross[g, j, l] - ysum[g, j] * mu[l]
                                        - mu[j] * ysum[g, l] + n_g * mu[j] * mu[l])
                # WR = W R
                for j in range(J):
                    for l in range(J):
                        s = 0.0
                        for q in range(J):
                            s += Wg[j * J + q] * R[q * J + l]
                        WR[j * J + l] = s
                # XA = WX Ainv
                for j in range(J):
                    for p in range(P):
                        s = 0.0
                        for q in range(P):
                            s += WXg[j * P + q] * Ainv[q * P + p]
                        XA[j * P + p] = s
                for j in range(J):
                    for l in range(J):
                        # E = n W - n WX Ainv WX' - c W R W
                        s = 0.0
                        for p in range(P):
                            s += XA[j * P + p] * WXg[l * P + p]
                        e = n_g * (Wg[j * J + l] - s)
                        s = 0.0
                        for q in range(J):
                            s += WR[j * J + q] * Wg[q * J + l]
                        e -= c * s
                        ga += e
                        gv += e * T[g, j] * T[g, l]
                        if ar1:
                            lag = j - l if j >= l else l - j
                            if lag == 0:
                                gg += e
                            else:
                                gg += e * pow(r, lag)
                                gr += e * lag * pow(r, lag - 1)
                        elif j == l:
                            gg += e
    free(V); free(W); free(WX); free(A); free(Ainv); free(b); free(col)
    free(mu); free(R); free(WR); free(XA)
    if want_grad and not fail:
        grad[0] = K * ga
        grad[1] = K * gg
        grad[2] = K * gv
        grad[3] = K * g2 * gr
    return f


cdef int _solve_small(double* M, double* rhs, int m) noexcept nogil:
    """Gaussian elimination with partial pivoting on an ``m x m`` row-major system."""
    cdef int i, j, k, piv
    cdef double big, t, scale = 0.0
    for i in range(m * m):
        t = M[i] if M[i] >= 0 else -M[i]
        if t > scale:
            scale = t
    if scale == 0.0:
        return -1
    for k in range(m):
        piv = k
        big = M[k * m + k] if M[k * m + k] >= 0 else -M[k * m + k]
        for i in range(k + 1, m):
            t = M[i * m + k] if M[i * m + k] >= 0 else -M[i * m + k]
            if t > big:
                big = t
                piv = i
        if big <= 1e-14 * scale:
            return -1
        if piv != k:
            for j in range(m):
                t = M[k * m + j]
                M[k * m + j] = M[piv * m + j]
                M[piv * m + j] = t
            t = rhs[k]
            rhs[k] = rhs[piv]
            rhs[piv] = t
        for i in range(k + 1, m):
            t = M[i * m + k] / M[k * m + k]
            for j in range(k, m):
                M[i * m + j] -= t * M[k * m + j]
            rhs[i] -= t * rhs[k]
    for i in range(m - 1, -1, -1):
        t = rhs[i]
        for j in range(i + 1, m):
            t -= M[i * m + j] * rhs[j]
        rhs[i] = t / M[i * m + i]
    return 0


cdef double _box_qp(int n, const double* g, const double* H, const double* lb,
                    const double* ub, double* out) noexcept nogil:
    """Face enumeration for ``min g'd + d'Hd/2`` on a box; ``out`` must hold a fallback point."""
    cdef int n_faces = 1, face, f, i, j, m, ok
    cdef int code[8]
    cdef int free_idx[8]
    cdef double d[8]
    cdef double M[64]
    cdef double rhs[8]
    cdef double val, best = INFINITY, s
    for i in range(n):
        n_faces *= 3
    for face in range(n_faces):
        f = face
        m = 0
        for i in range(n):
            code[i] = f % 3
            f //= 3
            if code[i] == 0:
                free_idx[m] = i
                m += 1
                d[i] = 0.0
            elif code[i] == 1:
                d[i] = lb[i]
            else:
                d[i] = ub[i]
        ok = 1
        if m > 0:
            for i in range(m):
                s = -g[free_idx[i]]
                for j in range(n):
                    if code[j] != 0:
                        s -= H[free_idx[i] * n + j] * d[j]
                rhs[i] = s
                for j in range(m):
                    M[i * m + j] = H[free_idx[i] * n + free_idx[j]]
            if _solve_small(M, rhs, m) != 0:
                ok = 0
            else:
                for i in range(m):
                    if rhs[i] <= lb[free_idx[i]] or rhs[i] >= ub[free_idx[i]]:
                        ok = 0
                        break
                    d[free_idx[i]] = rhs[i]
        if not ok:
            continue
        val = 0.0
        for i in range(n):
            s = g[i]
            for j in range(n):
                s += 0.5 * H[i * n + j] * d[j]
            val += s * d[i]
        if val < best:
            best = val
            for i in range(n):
                out[i] = d[i]
    return best


def box_qp(const double[::1] g, const double[:, ::1] H, const double[::1] lb,
           const double[::1] ub, double[::1] out):
    """Global minimizer of ``g'd + d'Hd/2`` on a box by face enumeration (n <= 8).

    Writes the minimizer into ``out`` and returns the model value.
    """
    cdef int n = g.shape[0]
    cdef double best
    if n > 8:
        raise ValueError("box_qp supports at most 8 variables")
    with nogil:
        best = _box_qp(n, &g[0], &H[0, 0], &lb[0], &ub[0], &out[0])
    return best


# ---- trust-region interpolation minimizer (mirrors swrve.optim._minimize_py) ----

cdef enum:
    NMAX = 8
    MMAX = 45


cdef int _invert(const double* A, double* out, double* work, int m) noexcept nogil:
    """Gauss-Jordan inverse with partial pivoting; ``work`` holds ``m*m`` doubles."""
    cdef int i, j, k, piv
    cdef double big, t
    for i in range(m * m):
        work[i] = A[i]
        out[i] = 0.0
    for i in range(m):
        out[i * m + i] = 1.0
    for k in range(m):
        piv = k
        big = fabs(work[k * m + k])
        for i in range(k + 1, m):
            t = fabs(work[i * m + k])
            if t > big:
                big = t
                piv = i
        if big == 0.0:
            return -1
        if piv != k:
            for j in range(m):
                t = work[k * m + j]; work[k * m + j] = work[piv * m + j]; work[piv * m + j] = t
                t = out[k * m + j]; out[k * m + j] = out[piv * m + j]; out[piv * m + j] = t
        t = 1.0 / work[k * m + k]
        for j in range(m):
            work[k * m + j] *= t
            out[k * m + j] *= t
        for i in range(m):
            if i != k:
                t = work[i * m + k]
                if t != 0.0:
                    for j in range(m):
                        work[i * m + j] -= t * work[k * m + j]
                        out[i * m + j] -= t * out[k * m + j]
    return 0


cdef double _norm1(const double* A, int m) noexcept nogil:
    cdef int i, j
    cdef double s, best = 0.0
    for j in range(m):
        s = 0.0
        for i in range(m):
            s += fabs(A[i * m + j])
        if s > best:
            best = s
    return best


cdef void _basis_row(const double* d, int n, double* row) noexcept nogil:
    cdef int i, j, p
    row[0] = 1.0
    for i in range(n):
        row[1 + i] = d[i]
        row[1 + n + i] = 0.5 * d[i] * d[i]
    p = 1 + 2 * n
    for i in range(n):
        for j in range(i + 1, n):
            row[p] = d[i] * d[j]
            p += 1


cdef void _quadratic(const double* coef, int n, double* g, double* H) noexcept nogil:
    cdef int i, j, p
    for i in range(n):
        g[i] = coef[1 + i]
        for j in range(n):
            H[i * n + j] = 0.0
        H[i * n + i] = coef[1 + n + i]
    p = 1 + 2 * n
    for i in range(n):
        for j in range(i + 1, n):
            H[i * n + j] = coef[p]
            H[j * n + i] = coef[p]
            p += 1


cdef double _qval(const double* g, const double* H, const double* d, int n) noexcept nogil:
    cdef int i, j
    cdef double s, val = 0.0
    for i in range(n):
        s = g[i]
        for j in range(n):
            s += 0.5 * H[i * n + j] * d[j]
        val += s * d[i]
    return val


cdef void _offsets(const double* x0, const double* lo, const double* hi, double delta,
                   int n, double* out) noexcept nogil:
    """Rows of the initial stencil written to ``out`` (``m x n``), first row zero."""
    cdef int i, j, r, m = (n + 1) * (n + 2) // 2
    cdef double a, b
    cdef double first[NMAX]
    for i in range(m * n):
        out[i] = 0.0
    r = 1
    for i in range(n):
        if x0[i] + delta <= hi[i]:
            a = delta
            b = -delta if x0[i] - delta >= lo[i] else 2 * delta
        else:
            a = -delta
            b = -2 * delta
        first[i] = a
        out[r * n + i] = a
        r += 1
        out[r * n + i] = b
        r += 1
    for i in range(n):
        for j in range(i + 1, n):
            out[r * n + i] = first[i]
            out[r * n + j] = first[j]
            r += 1


cdef inline double _clip(double v, double a, double b) noexcept nogil:
    return a if v < a else (b if v > b else v)


cdef class _Objective:
    cdef object fun
    cdef int n
    cdef public int nfev

    def __init__(self, fun, int n):
        self.fun = fun
        self.n = n
        self.nfev = 0

    cdef double call(self, const double* x) except? -1.0:
        cdef int i
        arr = np.empty(self.n)
        cdef double[::1] view = arr
        for i in range(self.n):
            view[i] = x[i]
        self.nfev += 1
        cdef double f = self.fun(arr)
        if not isfinite(f):
            return INFINITY
        return f


cdef int _argmin(const double* F, int m) noexcept nogil:
    cdef int i, k = 0
    for i in range(1, m):
        if F[i] < F[k]:
            k = i
    return k


cdef int _geometry(_Objective obj, const double* L, double* Y, double* F, const double* dist,
                   int k, const double* c, double delta, const double* lb, const double* ub,
                   int n, int m) except -1:
    cdef int i, j = 0, s
    cdef double far = -INFINITY, t, val, best_val = -1.0, sign
    cdef double coef[MMAX]
    cdef double g[NMAX]
    cdef double H[NMAX * NMAX]
    cdef double gs[NMAX]
    cdef double Hs[NMAX * NMAX]
    cdef double d[NMAX]
    cdef double best_d[NMAX]
    for i in range(m):
        t = -1.0 if i == k else dist[i]
        if t > far:
            far = t
            j = i
    for i in range(m):
        coef[i] = L[i * m + j]
    _quadratic(coef, n, g, H)
    for s in range(2):
        sign = 1.0 if s == 0 else -1.0
        for i in range(n):
            gs[i] = -sign * g[i]
            d[i] = _clip(-gs[i], lb[i], ub[i])
        for i in range(n * n):
            Hs[i] = -sign * H[i]
        _box_qp(n, gs, Hs, lb, ub, d)
        val = fabs(coef[0] + _qval(g, H, d, n))
        if val > best_val:
            best_val = val
            for i in range(n):
                best_d[i] = d[i]
    for i in range(n):
        Y[j * n + i] = c[i] + best_d[i] * delta
    F[j] = obj.call(&Y[j * n])
    return 0


def tr_minimize(fun, const double[::1] x0, const double[::1] lo, const double[::1] hi,
                double delta, double rhoend, double ftol, int maxfev):
    """Compiled trust-region loop; returns ``(x, f, nfev, nit, code)``.

    ``code`` is 0 (radius converged), 1 (step converged), 2 (maxfev),
    3 (non-finite start).  Arguments are prepared by ``swrve.optim``.
    """
    cdef int n = x0.shape[0]
    if n < 1 or n > NMAX:
        raise ValueError("tr_minimize supports 1 to 8 variables")
    cdef int m = (n + 1) * (n + 2) // 2
    cdef _Objective obj = _Objective(fun, n)
    cdef double Y[MMAX * NMAX]
    cdef double F[MMAX]
    cdef double OFF[MMAX * NMAX]
    cdef double Phi[MMAX * MMAX]
    cdef double L[MMAX * MMAX]
    cdef double work[MMAX * MMAX]
    cdef double dist[MMAX]
    cdef double coef[MMAX]
    cdef double row[MMAX]
    cdef double ell[MMAX]
    cdef double c[NMAX]
    cdef double lb[NMAX]
    cdef double ub[NMAX]
    cdef double g[NMAX]
    cdef double H[NMAX * NMAX]
    cdef double d[NMAX]
    cdef double xn[NMAX]
    cdef double dn[NMAX]
    cdef int i, j, q, k, r, nit = 0, code
    cdef bint cond_ok, all_finite, valid
    cdef double fc, t, pred, dmax, f_new, snorm, ratio, w, wbest
    cdef double delta_max = 0.0, span

    for i in range(n):
        span = hi[i] - lo[i]
        if 0.5 * span > delta_max:
            delta_max = 0.5 * span

    _offsets(&x0[0], &lo[0], &hi[0], delta, n, OFF)
    for r in range(m):
        for i in range(n):
            Y[r * n + i] = _clip(x0[i] + OFF[r * n + i], lo[i], hi[i])
    for r in range(m):
        F[r] = obj.call(&Y[r * n])
    if not isfinite(F[0]):
        code = 3
    else:
        while True:
            if obj.nfev >= maxfev:
                code = 2
                break
            if delta < rhoend:
                code = 0
                break
            nit += 1
            k = _argmin(F, m)
            fc = F[k]
            for i in range(n):
                c[i] = Y[k * n + i]
                lb[i] = max(lo[i] - c[i], -delta) / delta
                ub[i] = min(hi[i] - c[i], delta) / delta
            valid = True
            all_finite = True
            for r in range(m):
                t = 0.0
                for i in range(n):
                    dn[i] = (Y[r * n + i] - c[i]) / delta
                    if fabs(dn[i]) > t:
                        t = fabs(dn[i])
                dist[r] = t
                if t > 2.0 + 1e-12:
                    valid = False
                if not isfinite(F[r]):
                    all_finite = False
                _basis_row(dn, n, &Phi[r * m])

            cond_ok = _invert(Phi, L, work, m) == 0
            if cond_ok:
                for i in range(m * m):
                    if not isfinite(L[i]):
                        cond_ok = False
                        break
            if cond_ok:
                cond_ok = _norm1(Phi, m) * _norm1(L, m) < 1e12

            if not cond_ok or not all_finite:
                _offsets(c, &lo[0], &hi[0], delta, n, OFF)
                q = 1
                for r in range(m):
                    if r == k:
                        continue
                    for i in range(n):
                        Y[r * n + i] = _clip(c[i] + OFF[q * n + i], lo[i], hi[i])
                    F[r] = obj.call(&Y[r * n])
                    q += 1
                continue

            for i in range(m):
                t = 0.0
                for j in range(m):
                    t += L[i * m + j] * (F[j] - fc)
                coef[i] = t
            _quadratic(coef, n, g, H)
            for i in range(n):
                d[i] = _clip(-g[i], lb[i], ub[i])
            _box_qp(n, g, H, lb, ub, d)
            pred = -_qval(g, H, d, n)
            dmax = 0.0
            for i in range(n):
                if fabs(d[i]) > dmax:
                    dmax = fabs(d[i])

            if pred <= 1e-13 * max(1.0, fabs(fc)) or dmax < 1e-3 * rhoend / delta:
                if valid:
                    delta *= 0.1 if dmax < 0.1 else 0.5
                else:
                    _geometry(obj, L, Y, F, dist, k, c, delta, lb, ub, n, m)
                continue

            snorm = 0.0
            for i in range(n):
                xn[i] = _clip(c[i] + d[i] * delta, lo[i], hi[i])
                if fabs(xn[i] - c[i]) > snorm:
                    snorm = fabs(xn[i] - c[i])
            f_new = obj.call(xn)
            ratio = (fc - f_new) / pred if isfinite(f_new) else -INFINITY

            for i in range(n):
                dn[i] = (xn[i] - c[i]) / delta
            _basis_row(dn, n, row)
            j = 0
            wbest = -INFINITY
            for q in range(m):
                t = 0.0
                for r in range(m):
                    t += row[r] * L[r * m + q]
                w = fabs(t) * pow(max(1.0, dist[q]), 3)
                if q == k and f_new >= fc:
                    w = 0.0
                if w > wbest:
                    wbest = w
                    j = q
            if f_new < fc or wbest > 1.0:
                for i in range(n):
                    Y[j * n + i] = xn[i]
                F[j] = f_new

            if f_new < fc and (fc - f_new) < ftol and snorm < rhoend and valid and pred < ftol:
                code = 1
                break

            if ratio >= 0.75 and snorm >= 0.99 * delta:
                delta = min(2.0 * delta, delta_max)
            elif ratio >= 0.1:
                if snorm < 0.5 * delta:
                    delta = max(0.5 * delta, 2.0 * snorm)
            elif valid:
                delta = 0.5 * delta if snorm > 0.1 * delta else max(0.1 * delta, snorm)
            else:
                _geometry(obj, L, Y, F, dist, k, c, delta, lb, ub, n, m)

    k = _argmin(F, m)
    x = np.empty(n)
    for i in range(n):
        x[i] = Y[k * n + i]
    return x, F[k], obj.nfev, nit, code
