import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def anisotropic(n, D, ratio=0.9, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, D)) * ratio ** np.arange(D)).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def aniso_small():
    """3,000 base and 40 query vectors, D=32, std decaying by 0.9 per dimension."""
    return anisotropic(3000, 32, seed=11), anisotropic(40, 32, seed=12)


# acceptance verdicts, echoed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
