import numpy as np
import pytest

from psypipe import psychometrics as pm
from psypipe.data_model import LsiProtocol
from psypipe.gateway import Gateway, RetryPolicy
from psypipe.synthetic import SyntheticBackend, SyntheticPersonaConfig, synth_participants


@pytest.fixture(scope="session")
def hexaco():
    return pm.hexaco_key()


@pytest.fixture(scope="session")
def beyond():
    return pm.beyond_key()


@pytest.fixture(scope="session")
def protocol():
    return LsiProtocol.load()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def records():
    return synth_participants(12, seed=7)


def make_gateway(**overrides) -> Gateway:
    config = SyntheticPersonaConfig.default(**overrides)
    return Gateway({"synthetic": SyntheticBackend(config)}, retry=RetryPolicy(base_delay=0), sleep=lambda s: None)


@pytest.fixture
def gateway():
    return make_gateway()


def pytest_terminal_summary(terminalreporter):
    import criteria

    if criteria.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in criteria.RESULTS:
            terminalreporter.write_line(line)
