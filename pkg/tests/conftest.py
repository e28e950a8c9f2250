import numpy as np
import pytest

from fedemg.closedloop import UserModelParams
from fedemg.decoder import CostParams
from fedemg.seeding import make_rng
from fedemg.signal import ReferenceSpec, StreamedUpdate, synthesize_session

CRITERIA = {}


def record_criterion(n, ok, detail):
    CRITERIA[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_update(rng, C=8, T=120, dt=1 / 60):
    S = rng.uniform(0, 2, size=(C, T))
    ref = rng.uniform(-0.5, 0.5, size=(T, 2))
    cur = rng.uniform(-0.5, 0.5, size=(T, 2))
    return StreamedUpdate(S, ref, cur, dt)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_params():
    return UserModelParams(population_seed=7, channels=16)


@pytest.fixture(scope="session")
def small_sessions(small_params):
    """Five 16-channel subjects with 8 updates each (first 2 of 10 dropped)."""
    return [synthesize_session(i, small_params, ReferenceSpec(), 10, make_rng(7, "session", i),
                               exclude_first=2, seed=7) for i in range(5)]


@pytest.fixture
def cost():
    return CostParams()
