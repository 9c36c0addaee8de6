import numpy as np
import pytest

from taskph import (
    AnalyticDerivatives, ConstantInertiaModel, ConstantTask, PlanarChain, PlanarPositionTask,
    TaskSpacePH,
)

Q_A = np.array([0.3, 1.1, -0.7])
# second joint equilibrium with the same tip position as Q_A (damped Newton IK, 17 digits)
Q_B = np.array([1.0375564687684158, -0.05587348844624272, -1.0749866439458158])

ACCEPTANCE_LINES = []


@pytest.fixture
def planar3():
    return PlanarChain([1.0, 0.8, 0.6], [1.5, 1.0, 0.7])


@pytest.fixture
def task3(planar3):
    return PlanarPositionTask(planar3)


@pytest.fixture
def system3(planar3, task3):
    return TaskSpacePH(planar3, task3)


@pytest.fixture
def system3_exact(planar3, task3):
    return TaskSpacePH(planar3, task3, derivatives=AnalyticDerivatives())


@pytest.fixture
def toy():
    """n = 2, M = I, J = [1 0]."""
    return ConstantInertiaModel(np.eye(2)), ConstantTask([[1.0, 0.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_nonsingular(system, rng, count, max_condition=1e3):
    out = []
    while len(out) < count:
        q = rng.uniform(-np.pi, np.pi, system.n)
        if system.decompose(q).condition <= max_condition:
            out.append(q)
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
