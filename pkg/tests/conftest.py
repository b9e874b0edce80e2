import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from socal.noise import NoiseModel

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def poisson():
    return NoiseModel.poisson()


@pytest.fixture
def gaussian():
    return NoiseModel.gaussian()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def build_model(priors, boundaries=(), noise=None):
    """A fitted-looking model from explicit per-bin priors."""
    from socal.binning import BinSpec
    from socal.fitting import Family
    from socal.model import CalibrationModel

    noise = noise or NoiseModel.poisson()
    B = len(priors)
    return CalibrationModel(
        noise=noise, spec=BinSpec(list(boundaries)), priors=list(priors),
        family=Family("gamma") if noise.is_poisson else Family("gaussian-mixture", 1),
        bandwidth=1.0, monotone=False, fit_loglik=np.zeros(B), fit_status=("converged",) * B,
        fit_iterations=np.zeros(B, dtype=np.int64), n_items=np.ones(B, dtype=np.int64),
        clamped=np.zeros(B, dtype=bool), abscissa=np.arange(B, dtype=float),
    )


@pytest.fixture
def make_model():
    return build_model


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def report_criterion(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
