import numpy as np
import pytest

from retclip.data import SyntheticCohortConfig, generate_cohort
from retclip.gradcheck import tiny_config
from retclip.model import init_params

_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return init_params(tiny_config(), 0)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SyntheticCohortConfig(n_patients=12, seed=5))
