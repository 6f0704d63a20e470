import numpy as np
import pytest
from hypothesis import settings
from threadpoolctl import threadpool_limits

from stegsense.network import NetworkConfig

settings.register_profile("stegsense", deadline=None, max_examples=40)
settings.load_profile("stegsense")

# single-threaded BLAS keeps every run bit-reproducible
_limits = threadpool_limits(limits=1)

TINY = NetworkConfig(block_channels=(4, 4, 4, 6, 6, 8, 8, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
