import numpy as np
import pytest

from discap.synthworld import DatasetConfig, build_dataset
from discap.textcore import build_vocab


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(DatasetConfig(n_train=60, n_val=20, n_test=10, D=16, seed=3))


@pytest.fixture(scope="session")
def small_vocab(small_dataset):
    return build_vocab(small_dataset.all_refs())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
