import numpy as np
import pytest

from robustreg import aircraft as ac


@pytest.fixture(scope="session")
def params():
    return ac.AircraftParams()


@pytest.fixture(scope="session")
def levels(params):
    return ac.aircraft_level_sets(params, 3000.0)


@pytest.fixture(scope="session")
def loop(params, levels):
    return ac.AircraftLoop(params=params).with_levels(levels)


@pytest.fixture(scope="session")
def s0(params):
    return ac.nominal_initial_state(params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def envelope_points(params, count, seed=0):
    """Physical (v, gamma, theta) samples inside the observability region."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        x = np.array([rng.uniform(0.5, 1.5) * params.v0, rng.uniform(-1.2, 1.2),
                      rng.uniform(-1.2, 1.2)])
        if ac.in_O(params, x):
            out.append(x)
    return np.array(out)


ACCEPTANCE = {}


def record(criterion, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
