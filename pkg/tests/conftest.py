from __future__ import annotations

import numpy as np
import pytest

from mfbsde.field import SolverConfig, build_field
from mfbsde.master import MasterField
from mfbsde.problem import EXAMPLE3_DEFAULT, preset_example1, preset_example3
from mfbsde.riccati import solve_riccati


@pytest.fixture(scope="session")
def ex3():
    return preset_example3(EXAMPLE3_DEFAULT)


@pytest.fixture(scope="session")
def ex1b():
    return preset_example1(-1.0, 1.0, 1.0, 1.0)


def _master(spec, steps, nus):
    P = solve_riccati(spec, steps=steps)
    fs = build_field(spec, P, np.linspace(0, spec.T, steps + 1), nus, SolverConfig())
    return MasterField(P, fs)


@pytest.fixture(scope="session")
def ex3_field(ex3):
    """Coarse Example-3 master field shared by the field, master and particle tests."""
    return _master(ex3, 50, np.linspace(-2, 2, 41))


@pytest.fixture(scope="session")
def ex1b_field(ex1b):
    return _master(ex1b, 50, np.linspace(-1, 1, 21))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
