import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_data
from swrve import kernels
from swrve.lmm import CellData

compiled = pytest.mark.skipif(kernels.BACKEND != "cython", reason="extension not built")


def _stats(gen="NE_RI", I=8, S=4, K=5, seed=3):
    cells = CellData.from_dataset(make_data(I, S, K, generator=gen, seed=seed))
    X, T, counts, ysum, ycross = cells.stats()
    return (float(cells.cluster_period_size), X, T, counts, ysum, ycross, cells.ssw, float(cells.n_obs))


@compiled
@pytest.mark.parametrize("params,ar1", [
    ((0.0, 0.0, 0.0, 0.0), False),
    ((0.3, 0.1, 0.05, 0.0), False),
    ((0.0, 0.2, 0.1, 0.7), True),
    ((1.5, 0.0, 2.0, 0.0), False),
])
def test_reml_eval_parity(params, ar1):
    K, X, T, counts, ysum, ycross, ssw, n = _stats()
    g1, g2 = np.zeros(4), np.zeros(4)
    f1 = kernels.reml_eval(*params, ar1, K, X, T, counts, ysum, ycross, ssw, n, g1)
    f2 = kernels.python_reml_eval(*params, ar1, K, X, T, counts, ysum, ycross, ssw, n, g2)
    assert f1 == pytest.approx(f2, rel=1e-12, abs=1e-10)
    assert np.allclose(g1, g2, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("impl", ["reml_eval", "python_reml_eval"])
def test_reml_gradient_matches_differences(impl):
    fn = getattr(kernels, impl)
    K, X, T, counts, ysum, ycross, ssw, n = _stats(gen="DTD_RI")
    for ar1, p in ((False, [0.3, 0.1, 0.05, 0.0]), (True, [0.0, 0.2, 0.1, 0.5])):
        g = np.zeros(4)
        fn(*p, ar1, K, X, T, counts, ysum, ycross, ssw, n, g)
        for i in range(4):
            if ar1 and i == 0 or not ar1 and i == 3:
                continue
            h = 1e-6
            up, dn = list(p), list(p)
            up[i] += h
            dn[i] -= h
            fd = (fn(*up, ar1, K, X, T, counts, ysum, ycross, ssw, n)
                  - fn(*dn, ar1, K, X, T, counts, ysum, ycross, ssw, n)) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def _brute_qp(g, H, lb, ub, m=41):
    axes = [np.linspace(a, b, m) for a, b in zip(lb, ub)]
    D = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(g))
    vals = D @ g + 0.5 * np.einsum("ki,ij,kj->k", D, H, D)
    return float(vals.min())


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**32 - 1), st.booleans())
def test_box_qp_global(n, seed, definite):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, n))
    H = B @ B.T if definite else 0.5 * (B + B.T)
    g = rng.normal(size=n)
    lb = -rng.uniform(0.1, 2.0, n)
    ub = rng.uniform(0.1, 2.0, n)
    for solve in (kernels.box_qp, kernels.python_box_qp):
        d = solve(g, H, lb, ub)
        assert np.all(d >= lb - 1e-12) and np.all(d <= ub + 1e-12)
        q = float(g @ d + 0.5 * d @ H @ d)
        assert q <= _brute_qp(g, H, lb, ub) + 1e-10


@compiled
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_box_qp_parity(n, seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, n))
    H = 0.5 * (B + B.T)
    g = rng.normal(size=n)
    lb, ub = -np.ones(n), np.ones(n)
    a, b = kernels.box_qp(g, H, lb, ub), kernels.python_box_qp(g, H, lb, ub)
    qa, qb = g @ a + 0.5 * a @ H @ a, g @ b + 0.5 * b @ H @ b
    assert qa == pytest.approx(qb, abs=1e-12)


def _rosen(x):
    return float(sum(100 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))


@compiled
@pytest.mark.parametrize("fun,x0,lo,hi", [
    (lambda x: float(np.sum((x - np.array([0.3, 1.2])) ** 2 * [1.0, 4.0])), [1.0, 0.0], [0, 0], [2, 2]),
    (lambda x: float((x[0] + 1) ** 2 + x[1] ** 2), [0.5, 0.5], [0, -1], [1, 1]),
])
def test_tr_minimize_parity(fun, x0, lo, hi):
    args = (np.array(x0, float), np.array(lo, float), np.array(hi, float), 0.25, 1e-8, 1e-12, 2000)
    a = kernels.tr_minimize(fun, *args)
    b = kernels.python_tr_minimize(fun, *args)
    assert a[2:] == b[2:]
    assert np.allclose(a[0], b[0], atol=1e-10, rtol=0)


@compiled
def test_tr_minimize_same_optimum_on_long_paths():
    # round-off separates the two paths along the valley; the end point must agree
    args = (np.array([-1.0, 1.5, 0.5]), -2 * np.ones(3), 2 * np.ones(3), 0.25, 1e-8, 1e-12, 2000)
    a = kernels.tr_minimize(_rosen, *args)
    b = kernels.python_tr_minimize(_rosen, *args)
    assert a[4] == b[4] == 0
    assert np.allclose(a[0], 1.0, atol=1e-6) and np.allclose(b[0], 1.0, atol=1e-6)


def test_pure_python_switch():
    env = dict(os.environ, SWRVE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from swrve import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@compiled
def test_fit_identical_across_backends():
    code = ("import json; from swrve.lmm import reml_fit; import sys; sys.path.insert(0, 'tests');"
            "from conftest import make_data;"
            "f = reml_fit(make_data(8, 4, 5, seed=9), structure='NE_RI');"
            "print(json.dumps([float(f.treatment_effect), f.reml_loglik, f.nfev]))")
    root = os.path.dirname(os.path.dirname(__file__))
    res = []
    for flag in ("", "1"):
        env = dict(os.environ, SWRVE_PURE_PYTHON=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, cwd=root,
                             capture_output=True, text=True, check=True)
        res.append(eval(out.stdout))
    (t1, l1, n1), (t2, l2, n2) = res
    assert abs(t1 - t2) < 1e-8 and abs(l1 - l2) < 1e-8
