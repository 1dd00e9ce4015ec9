"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is timed in-process through ``swrve.kernels``.  Full REML fits
are timed in two child processes, one with ``SWRVE_PURE_PYTHON=1``, so that
every internal call goes through the selected backend.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from swrve import kernels
from swrve.datagen import GenSpec, generate
from swrve.design import build_design
from swrve.covariance import IccSpec, icc_to_components
from swrve.lmm import CellData

FIT_SNIPPET = """
import json, sys, timeit
from swrve import kernels
from swrve.covariance import IccSpec, icc_to_components
from swrve.datagen import GenSpec, generate
from swrve.design import build_design
from swrve.lmm import CellData, reml_fit
I, S, K, n = map(int, sys.argv[1:5])
vc = icc_to_components(IccSpec(0.05, 0.15, 0.8, 1.0), "NE_RI")
cells = [CellData.from_dataset(generate(GenSpec(build_design(I, S, K), "NE_RI", vc, seed=1, replicate_id=r)))
         for r in range(n)]
out = {}
for s in ("EXCH", "NE", "NE_RI", "DTD_RI"):
    t = min(timeit.repeat(lambda: [reml_fit(c, structure=s) for c in cells], number=1, repeat=3))
    out[s] = t / n
print(json.dumps({"backend": kernels.BACKEND, "fit": out}))
"""


def _stats(I=16, S=4, K=10):
    vc = icc_to_components(IccSpec(0.05, 0.15, 0.8, 1.0), "DTD_RI")
    data = generate(GenSpec(build_design(I, S, K), "DTD_RI", vc, seed=2))
    cells = CellData.from_dataset(data)
    X, T, counts, ysum, ycross = cells.stats()
    return (float(cells.cluster_period_size), X, T, counts, ysum, ycross, cells.ssw, float(cells.n_obs))


def _time(fn, repeat, number):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_kernels(repeat):
    args = _stats()
    g = np.zeros(4)
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    H = A @ A.T - 0.5 * np.eye(3)
    qg, lb, ub = rng.standard_normal(3), -np.ones(3), np.ones(3)

    def rosen(x):
        return float(sum(100 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))

    x0, lo, hi = np.array([-1.0, 1.5, 0.5]), np.full(3, -3.0), np.full(3, 3.0)
    cases = {
        "reml_eval (DTD_RI, grad)": (
            lambda: kernels.reml_eval(0.1, 0.05, 0.02, 0.6, True, *args, g),
            lambda: kernels.python_reml_eval(0.1, 0.05, 0.02, 0.6, True, *args, g), 200),
        "box_qp (3-d indefinite)": (
            lambda: kernels.box_qp(qg, H, lb, ub),
            lambda: kernels.python_box_qp(qg, H, lb, ub), 200),
        "tr_minimize (Rosenbrock 3-d)": (
            lambda: kernels.tr_minimize(rosen, x0, lo, hi, 0.5, 1e-8, 1e-12, 4000),
            lambda: kernels.python_tr_minimize(rosen, x0, lo, hi, 0.5, 1e-8, 1e-12, 4000), 3),
    }
    rows = []
    for name, (fast, slow, number) in cases.items():
        tf, ts = _time(fast, repeat, number), _time(slow, repeat, number)
        rows.append((name, tf, ts))
    return rows


def bench_fits(I=16, S=4, K=10, n=10):
    res = {}
    for pure in (False, True):
        env = dict(os.environ)
        env.pop("SWRVE_PURE_PYTHON", None)
        if pure:
            env["SWRVE_PURE_PYTHON"] = "1"
        out = subprocess.run([sys.executable, "-c", FIT_SNIPPET, str(I), str(S), str(K), str(n)],
                             env=env, capture_output=True, text=True, check=True)
        r = json.loads(out.stdout)
        res[r["backend"]] = r["fit"]
    return res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--fits", type=int, default=10, help="datasets per structure in the fit benchmark")
    args = ap.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled extension not available; rebuild with `pip install -e . --no-build-isolation`")
        return 1
    print(f"{'kernel':34s} {'cython':>12s} {'python':>12s} {'speedup':>8s}")
    for name, tf, ts in bench_kernels(args.repeat):
        print(f"{name:34s} {tf * 1e6:10.1f}us {ts * 1e6:10.1f}us {ts / tf:7.1f}x")
    fits = bench_fits(n=args.fits)
    for s in fits["cython"]:
        tf, ts = fits["cython"][s], fits["python"][s]
        print(f"{'reml_fit ' + s + ' (I=16 S=4 K=10)':34s} {tf * 1e3:10.2f}ms {ts * 1e3:10.2f}ms {ts / tf:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
