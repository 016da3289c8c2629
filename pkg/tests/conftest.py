import os

import numpy as np
import pytest

from bliptest.study import StudyConfig, run_study

ACCEPTANCE_LINES: list[str] = []

# BLIPTEST_ACCEPTANCE=smoke runs the reduced type I error study (200 replicates, B = 200)
SMOKE = os.environ.get("BLIPTEST_ACCEPTANCE", "full").lower() == "smoke"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    def log(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return log


@pytest.fixture(scope="session")
def normal_battery():
    """Full battery on the normal spec: n in {1000, 3000}, 1000 replicates, B = 500."""
    reps, B = (200, 200) if SMOKE else (1000, 500)
    cfg = StudyConfig(dgp=["normal"], n_list=[1000, 3000], mc_reps=reps, bootstrap_B=B, seed=20240601)
    return run_study(cfg)


@pytest.fixture(scope="session")
def discrete_battery():
    """Battery on the bernoulli and poisson specs with 400 replicates and B = 200."""
    cfg = StudyConfig(dgp=["bernoulli", "poisson"], n_list=[1000, 3000], mc_reps=400, bootstrap_B=200, seed=7)
    return run_study(cfg)


@pytest.fixture(scope="session")
def estimator_moments():
    """Point estimates only (no bootstrap) for all three families, n = 1000, 1000 replicates."""
    cfg = StudyConfig(dgp=["normal", "bernoulli", "poisson"], n_list=[1000], mc_reps=1000, bootstrap_B=0, seed=99)
    return run_study(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
