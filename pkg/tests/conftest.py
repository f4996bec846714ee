import numpy as np
import pytest

from morl.envgen import gen_behavior_policies, gen_model_class, gen_task_family, identity_chain


@pytest.fixture(scope="session")
def family0():
    return gen_task_family(5, 2, 3, 2, 4, np.random.default_rng(0))


@pytest.fixture(scope="session")
def mdp0(family0):
    return family0[0]


@pytest.fixture(scope="session")
def behavior0(family0):
    return gen_behavior_policies(family0, 0.25, np.random.default_rng(1))


@pytest.fixture(scope="session")
def class0(family0):
    return gen_model_class(family0, 7, 8, 0.2, np.random.default_rng(2), scale_decay=0.5)


@pytest.fixture
def chain():
    return identity_chain()


@pytest.fixture
def uniform4():
    from morl.mdp import TabularLowRankMDP

    return TabularLowRankMDP(np.ones((1, 4, 1, 1)), np.full((1, 4, 1), 0.25), np.zeros((1, 4, 1)))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
