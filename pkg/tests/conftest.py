import numpy as np
import pytest

from asyncnn.analysis import solve_reference
from asyncnn.objectives import Dataset, make_problem, partition_uniform, quadratic_locals
from asyncnn.topology import build_consensus, build_graph


def k5_quadratic():
    cm = build_consensus(build_graph("complete", 5))
    return make_problem(quadratic_locals([1.0] * 5, [1, 2, 3, 4, 5]), cm, 1.0)


def toy_dataset(K=40, dim=4, seed=3):
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(K, dim))
    v = np.where(U @ np.linspace(1.0, -1.0, dim) + 0.3 * rng.normal(size=K) > 0, 1.0, -1.0)
    return Dataset(U, v, "toy")


def logistic_problem(kind="complete", n=5, seed=0, upsilon=1.0):
    cm = build_consensus(build_graph(kind, n, seed=seed))
    return make_problem(partition_uniform(toy_dataset(), n, seed, upsilon=upsilon), cm, 1.0)


@pytest.fixture
def k5():
    spec = k5_quadratic()
    return spec, solve_reference(spec)


@pytest.fixture
def logreg():
    spec = logistic_problem()
    return spec, solve_reference(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
