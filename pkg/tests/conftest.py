import numpy as np
import pytest
from hypothesis import settings

from riccati_ipm.model import OcpProblem, Stage, TerminalCost
from riccati_ipm.problems import linear_dynamics, quadratic_cost, terminal_quadratic

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")

# lines printed by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def scalar_lqr(N=1, x0=1.0, a=1.0, b=1.0, q=1.0, r=1.0, p=1.0):
    """x' = a x + b u with cost 0.5 q x^2 + 0.5 r u^2 and terminal 0.5 p x^2."""
    st = Stage(1, 1, 1, quadratic_cost([[q]], [[r]]), linear_dynamics([[a]], [[b]]))
    return OcpProblem(np.array([x0]), [st] * N, TerminalCost(1, terminal_quadratic([[p]])))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
