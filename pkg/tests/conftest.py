import sys
import warnings
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from swrve.covariance import CovStructure, IccSpec, icc_to_components  # noqa: E402
from swrve.datagen import GenSpec, generate  # noqa: E402
from swrve.design import build_design  # noqa: E402


def make_data(I=8, S=4, K=10, rho=(0.01, 0.05), generator="NE_RI", theta=0.0, seed=11, rep=0):
    d = build_design(I, S, K)
    vc = icc_to_components(IccSpec(rho[0], rho[1], 0.8), generator)
    return generate(GenSpec(d, CovStructure.parse(generator), vc, theta=theta, seed=seed, replicate_id=rep))


@pytest.fixture
def small_data():
    return make_data(8, 4, 3, rho=(0.05, 0.15), seed=5)


@pytest.fixture(autouse=True)
def _quiet_degenerate():
    from swrve.errors import DegenerateAdjustment

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateAdjustment)
        yield


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
