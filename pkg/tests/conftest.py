import time

import numpy as np
import pytest

from horizon_sde import hjb_fd
from horizon_sde import merton_debt as md


@pytest.fixture(scope="session")
def market():
    return md.MarketParams(r=0.03, b_drift=0.1, sigma=0.15)


@pytest.fixture(scope="session")
def problem21(market):
    return md.DebtProblem(market, beta=2.1, T=1.0, c1=-3.0, c2=0.0, x0=-100.0)


# wall time of each session HJB solve, keyed by variant
HJB_SECONDS = {}


def _solve(problem, variant, n_x=400):
    grid = hjb_fd.Grid1D(-200.0, 0.0, n_x, problem.T)
    start = time.perf_counter()
    sol = hjb_fd.solve_hjb_1d(hjb_fd.debt_hjb_problem(problem, variant), grid, save_every=500)
    HJB_SECONDS[variant] = time.perf_counter() - start
    return sol


@pytest.fixture(scope="session")
def hjb_running(problem21):
    return _solve(problem21, md.RUNNING)


@pytest.fixture(scope="session")
def hjb_terminal(problem21):
    return _solve(problem21, md.TERMINAL)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
