import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from ivcox.data import Dataset  # noqa: E402
from ivcox.simgen import SimConfig, generate  # noqa: E402


def make_dataset(n=200, p=2, seed=0, censor=0.5):
    """Small generic right-censored dataset with distinct times."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, p))
    V = rng.binomial(1, 0.5, n)
    D = np.where(rng.uniform(size=n) < 0.7, V, 1 - V)
    lp = -0.5 * D + X @ np.linspace(0.3, -0.3, p)
    T = rng.exponential(np.exp(-lp))
    C = rng.exponential(1 / censor, n) if censor > 0 else np.full(n, np.inf)
    return Dataset(time=np.minimum(T, C), status=(T <= C).astype(int), treatment=D, instrument=V, covariates=X)


@pytest.fixture
def small_data():
    return make_dataset()


@pytest.fixture(scope="session")
def case3():
    return generate(SimConfig.from_case(1, 3, seed=11))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
