import numpy as np
import pytest

from nsnudge import config
from nsnudge.assimilation import TruthCache
from nsnudge.runner import build_problem, initial_state


def small_config(**overrides) -> dict:
    """A 32^2 configuration that runs in well under a second per trajectory."""
    cfg = config.defaults()
    cfg.update(grid_n=32, nu=0.01, dt=0.125, delta=1.0, force_lambda_m=4.0, force_lambda_M=9.0,
               force_l2=0.1, network="lattice:4", filter_lambda=20.0, spinup_time=100.0,
               t_end=20.0, members=4, eps_list=(1e-2, 1e-3, 1e-4), window_lo=10.0, window_hi=20.0,
               certify_trials=10, tail_draws=20_000, mu=1.0, mu_sweep=(0.5, 1.0))
    cfg.update(overrides)
    config.check(cfg)
    return cfg


@pytest.fixture(scope="session")
def small_problem():
    return build_problem(small_config())


@pytest.fixture(scope="session")
def small_state(small_problem):
    return initial_state(small_problem)


@pytest.fixture(scope="session")
def small_truth(small_problem, small_state, tmp_path_factory):
    ac = small_problem.assimilation_config(epsilon=1e-2)
    path = tmp_path_factory.mktemp("truth") / "truth.npy"
    return TruthCache.generate(ac, small_state, 20, path)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
