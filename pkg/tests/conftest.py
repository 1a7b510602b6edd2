import numpy as np
import pytest

from spell_lab.schedule import NoiseSchedule

ACCEPTANCE_LINES = {}


@pytest.fixture
def schedule():
    return NoiseSchedule()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records a PASS/FAIL line for acceptance criterion ``n``."""
    def record(n, ok, detail):
        ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
