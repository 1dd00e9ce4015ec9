import math

import numpy as np
import pytest

from swrve.optim import minimize_bounded, solve_box_qp


def test_interior_quadratic():
    c = np.array([0.3, -0.7, 1.1])
    res = minimize_bounded(lambda x: float(np.sum((x - c) ** 2)), np.zeros(3), -2 * np.ones(3), 2 * np.ones(3))
    assert res.success and res.status == "converged"
    assert np.allclose(res.x, c, atol=1e-6)


def test_active_bound():
    res = minimize_bounded(lambda x: float((x[0] + 1) ** 2 + (x[1] - 0.5) ** 2), [0.5, 0.0], [0, 0], [3, 3])
    assert res.success
    assert res.x[0] == 0.0
    assert res.x[1] == pytest.approx(0.5, abs=1e-6)


def test_rosenbrock():
    f = lambda x: float(100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2)
    res = minimize_bounded(f, [-1.2, 1.0], [-3, -3], [3, 3], maxfev=2000, rhoend=1e-9, ftol=1e-14)
    assert res.success
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-4)


def test_one_dimensional():
    res = minimize_bounded(lambda x: math.cos(x[0]), [2.0], [0.0], [6.0])
    assert res.x[0] == pytest.approx(math.pi, abs=1e-5)


def test_budget_and_start_failures():
    res = minimize_bounded(lambda x: float(np.sum(x ** 4)), [1.0, 1.0], [-2, -2], [2, 2], maxfev=6)
    assert not res.success and res.status == "maxfev" and res.nfev <= 6
    res = minimize_bounded(lambda x: math.nan, [1.0], [0.0], [2.0])
    assert not res.success and res.status == "nonfinite"
    with pytest.raises(ValueError):
        minimize_bounded(lambda x: 0.0, [1.0], [1.0], [1.0])


def test_nonfinite_region_avoided():
    f = lambda x: math.inf if x[0] < 0.2 else float((x[0] - 0.1) ** 2)
    res = minimize_bounded(f, [1.0], [0.0], [2.0])
    assert res.x[0] == pytest.approx(0.2, abs=1e-4)


def test_start_clipped_into_box():
    res = minimize_bounded(lambda x: float(np.sum(x ** 2)), [5.0, -5.0], [-1, -1], [1, 1])
    assert res.success and np.allclose(res.x, 0.0, atol=1e-6)


def test_box_qp_indefinite_corner():
    d = solve_box_qp(np.zeros(2), np.array([[-1.0, 0.0], [0.0, 1.0]]), -np.ones(2), 2 * np.ones(2))
    assert np.allclose(d, [2.0, 0.0])
