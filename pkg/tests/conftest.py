import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from badlabel_lab import datasets

settings.register_profile(
    "lab", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("lab")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth():
    return datasets.gen_synthetic(datasets.SyntheticSpec(seed=0))


@pytest.fixture(scope="session")
def small_synth():
    spec = datasets.SyntheticSpec(n_train_per_class=100, n_test_per_class=50, seed=3)
    return datasets.gen_synthetic(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
