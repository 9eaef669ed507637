"""Shared fixtures: small grids and conductivities reused across modules."""
import numpy as np
import pytest

from calderon_lab.conductivity import synth_smooth
from calderon_lab.grid import make_grid
from calderon_lab.mollifier import default_kernel


@pytest.fixture(scope="session")
def grid16():
    return make_grid(3, 16, np.pi)


@pytest.fixture(scope="session")
def grid32():
    return make_grid(3, 32, np.pi)


@pytest.fixture(scope="session")
def grid64():
    return make_grid(3, 64, np.pi)


@pytest.fixture(scope="session")
def kernel3():
    return default_kernel(3)


@pytest.fixture(scope="session")
def bump32(grid32):
    """Smooth bump conductivity of amplitude 0.3 on the 32^3 grid."""
    return synth_smooth(0.3, None, 1.5, grid32, sharpness=4.0)


@pytest.fixture(scope="session")
def bump64(grid64):
    """The acceptance conductivity: amplitude 0.3, radius 1.5, beta 4 on 64^3."""
    return synth_smooth(0.3, None, 1.5, grid64, sharpness=4.0)


# --------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion in the terminal report
# --------------------------------------------------------------------------
ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, passed, detail)``; printed at the end of the run."""
    store = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(criterion: int, passed: bool, detail: str = ""):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        store[criterion] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
