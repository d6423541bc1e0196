import numpy as np
import pytest

from cascade_lab.grid_fields import Grid, PhysParams


@pytest.fixture(scope="session")
def g32():
    return Grid(32, 2 * np.pi)


@pytest.fixture(scope="session")
def g64():
    return Grid(64, 2 * np.pi)


@pytest.fixture
def params():
    return PhysParams(nu=0.01, eta=0.02, R0=np.pi / 2, T=1.0)


# one line per acceptance criterion, printed at the end of the run
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        status, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {status} {detail}")
