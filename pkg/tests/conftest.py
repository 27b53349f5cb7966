from fractions import Fraction

import numpy as np
import pytest

from rwrp.environment import PeriodicEnvironment, SitePotential
from rwrp.geometry import build_geometry


@pytest.fixture
def line12():
    """Steps {1, 2} on Z with the uniform kernel."""
    return build_geometry(1, [(1,), (2,)])


@pytest.fixture
def spacetime1():
    """d=1 space-time walk, steps (0,1) and (1,1)."""
    return build_geometry(2, [(0, 1), (1, 1)])


@pytest.fixture
def period2():
    return PeriodicEnvironment(np.array([0.0, 1.0]))


@pytest.fixture
def site():
    return SitePotential(beta=1.0)


def F(*xs):
    return tuple(Fraction(x) for x in xs)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records the pass/fail line of acceptance criterion ``k``."""

    def record(k: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[k] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
