import numpy as np
import pytest

from deepspar import spar
from deepspar.dataio import synth_gaussian_copula

ACCEPTANCE = []


@pytest.fixture(scope="session")
def gaussian_sample():
    """Standard bivariate Gaussian sample on the centred scale."""
    return np.random.default_rng(20_240).standard_normal((50_000, 2))


@pytest.fixture(scope="session")
def gaussian_model(gaussian_sample):
    return spar.fit_centred(gaussian_sample, spar.SparConfig(seed=0))


@pytest.fixture(scope="session")
def lognormal_obs():
    return synth_gaussian_copula(5_000, 2, [[1.0, 0.5], [0.5, 1.0]], seed=11)


@pytest.fixture(scope="session")
def lognormal_model(lognormal_obs):
    return spar.spar_fit(lognormal_obs, spar.SparConfig(seed=1))


@pytest.fixture
def record_criterion():
    """Record one acceptance criterion outcome for the terminal summary."""

    def record(name, passed, detail=""):
        ACCEPTANCE.append((name, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
