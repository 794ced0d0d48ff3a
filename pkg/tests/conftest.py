import numpy as np
import pytest

from h1bkv import toymodel

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    config = toymodel.ModelConfig(n_layers=2, d_model=32, n_heads=2, max_context=128, weight_seed=3)
    return toymodel.init_weights(config)


@pytest.fixture(scope="session")
def default_model():
    return toymodel.init_weights(toymodel.ModelConfig())
