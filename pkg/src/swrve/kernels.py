"""Select the compiled or numpy kernels at import time.

The compiled extension is used when it was built; set ``SWRVE_PURE_PYTHON=1``
to force the numpy implementation.
"""
import os

import numpy as np

from . import _core_py


def _python_box_qp(g, H, lb, ub):
    from .optim import _solve_box_qp_py

    return _solve_box_qp_py(g, H, lb, ub)


def _python_tr_minimize(fun, x0, lo, hi, delta, rhoend, ftol, maxfev):
    from .optim import _minimize_py

    return _minimize_py(fun, x0, lo, hi, delta, rhoend, ftol, maxfev)


BACKEND = "python"
reml_eval = _core_py.reml_eval
box_qp = _python_box_qp
tr_minimize = _python_tr_minimize

if not os.environ.get("SWRVE_PURE_PYTHON"):
    try:
        from . import _core
    except ImportError:  # extension not built
        pass
    else:
        reml_eval = _core.reml_eval
        tr_minimize = _core.tr_minimize
        BACKEND = "cython"

        def box_qp(g, H, lb, ub):
            out = np.clip(-g, lb, ub)
            _core.box_qp(np.ascontiguousarray(g, dtype=float), np.ascontiguousarray(H, dtype=float),
                         np.ascontiguousarray(lb, dtype=float), np.ascontiguousarray(ub, dtype=float), out)
            return out

python_reml_eval = _core_py.reml_eval
python_tr_minimize = _python_tr_minimize
python_box_qp = _python_box_qp

__all__ = ["BACKEND", "reml_eval", "python_reml_eval", "box_qp", "tr_minimize",
           "python_tr_minimize", "python_box_qp"]
