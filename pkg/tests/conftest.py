import numpy as np
import pytest

from msadgn.config import TrainConfig
from msadgn.data import make_benchmark


def small_config(**kw) -> TrainConfig:
    base = dict(K=3, signal_len=32, channels=(4, 4, 8, 8), fc_hidden=(16, 8), epochs=2, batch_size=8)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture(scope="session")
def bench():
    return make_benchmark(0, 3, 4, n_per_class=16, length=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
