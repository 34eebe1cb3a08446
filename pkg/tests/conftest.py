import numpy as np
import pytest

from mcmcsgd.chain_core import FiniteKernel
from mcmcsgd.problems import (
    DiscreteViSpec,
    EntropyBanditSpec,
    IsingVmcSpec,
    build_discrete_vi,
    build_entropy_bandit,
    build_ising,
    ring_template,
)


def two_state(p: float, q: float) -> FiniteKernel:
    return FiniteKernel.from_matrix([[1 - p, p], [q, 1 - q]])


@pytest.fixture
def ising3():
    return build_ising(IsingVmcSpec(sites=3, J=1.0, h=1.0))


@pytest.fixture
def bandit():
    return build_entropy_bandit(EntropyBanditSpec((1.0, 0.5, 0.0, -0.5, -1.0), 0.5))


@pytest.fixture
def vi():
    return build_discrete_vi(DiscreteViSpec((0.1, 0.2, 0.3, 0.4)))


@pytest.fixture
def ring():
    return ring_template().build()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
