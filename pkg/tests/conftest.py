import numpy as np
import pytest

from compactlm import autograd as ag
from compactlm.data import make_corpus


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs")


@pytest.fixture
def store():
    s = ag.SavedBufferStore()
    with ag.use_store(s):
        yield s


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    make_corpus(path, 1 << 20)
    return path


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("small") / "small.txt"
    make_corpus(path, 64 << 10)
    return path


_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion and echo it."""
    def rec(label, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return rec


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
