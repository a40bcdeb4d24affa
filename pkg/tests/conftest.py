import numpy as np
import pytest

from saemvs.model import DesignMatrices, HyperParams, ObservationSet, PopulationParams, linear_growth

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def linear_dataset(n=30, p=10, n_i=8, sigma2=0.05, Gamma=0.3, mu=2.0, beta=None, seed=0):
    """Synthetic data for ``y = phi t + eps`` with ``phi ~ N(mu + V beta, Gamma)``."""
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n, p))
    design = DesignMatrices.from_raw(V)
    if beta is None:
        beta = np.zeros(p)
        beta[:2] = [1.0, -0.5][:p]
    phi = mu + design.V_std @ np.asarray(beta, float) + np.sqrt(Gamma) * rng.standard_normal(n)
    t = np.tile(np.linspace(0.5, 3.0, n_i), n)
    ind = np.repeat(np.arange(n), n_i)
    y = phi[ind] * t + np.sqrt(sigma2) * rng.standard_normal(n * n_i)
    return ObservationSet(y, t, ind, n), design, linear_growth()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear_problem():
    obs, design, model = linear_dataset()
    hyper = HyperParams(nu0=0.01, nu1=100.0, sigma2_mu=100.0, nu_Gamma=1.0, lambda_Gamma=0.1)
    theta0 = PopulationParams.initial(1, design.p, mu=1.0, Gamma=1.0, sigma2=1.0, beta=1.0)
    return obs, design, model, hyper, theta0
