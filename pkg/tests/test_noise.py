import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from socal.noise import (
    NoiseModel,
    DomainError,
    UnsupportedOrderError,
    falling_factorial,
    log_noise_density,
    umvu_gaussian_moment,
)


def test_poisson_density_at_zero(poisson):
    assert log_noise_density(poisson, 1.0, 1.0, 0) == pytest.approx(-1.0, abs=1e-15)


def test_gaussian_density_at_mode(gaussian):
    assert log_noise_density(gaussian, 0.0, 1.0, 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_poisson_density_direct_pmf(poisson):
    # 3^3 e^-3 / 3!
    expected = math.log(27.0 * math.exp(-3.0) / 6.0)
    assert expected == pytest.approx(-1.4959, abs=1e-4)
    assert log_noise_density(poisson, 0.5, 6.0, 3) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("y", [-1, 2.5])
def test_poisson_rejects_bad_counts(poisson, y):
    with pytest.raises(DomainError):
        log_noise_density(poisson, 1.0, 1.0, y)


@pytest.mark.parametrize("offset", [0.0, -2.0])
def test_rejects_nonpositive_offset(poisson, gaussian, offset):
    with pytest.raises(DomainError):
        log_noise_density(poisson, 1.0, offset, 1)
    with pytest.raises(DomainError):
        log_noise_density(gaussian, 1.0, offset, 1.0)


def test_gaussian_rejects_nonfinite_y(gaussian):
    with pytest.raises(DomainError):
        log_noise_density(gaussian, 0.0, 1.0, np.inf)


@given(st.floats(0.01, 50.0), st.floats(0.1, 10.0))
def test_poisson_pmf_sums_to_one(mean, offset):
    theta = mean / offset
    top = int(mean + 20 * math.sqrt(mean) + 50)
    ys = np.arange(top + 1)
    total = math.fsum(np.exp(log_noise_density(NoiseModel.poisson(), theta, offset, ys)))
    assert abs(total - 1.0) < 1e-10


@given(st.floats(-5, 5), st.floats(0.05, 20.0))
def test_gaussian_density_integrates_to_one(theta, sigma):
    gaussian = NoiseModel.gaussian()
    f = lambda y: math.exp(log_noise_density(gaussian, theta, sigma, y))
    total, _ = integrate.quad(f, theta - 12 * sigma, theta + 12 * sigma, epsabs=1e-13, epsrel=1e-13)
    assert abs(total - 1.0) < 1e-8


def test_falling_factorial_examples():
    assert falling_factorial(5, 2) == 20
    assert falling_factorial(3, 4) == 0
    assert falling_factorial(7, 1) == 7


def test_falling_factorial_needs_positive_order():
    with pytest.raises(ValueError):
        falling_factorial(3, 0)


@pytest.mark.parametrize("y", range(21))
def test_falling_factorial_matches_factorial_ratio(y):
    for k in range(1, y + 1):
        exact = math.factorial(y) // math.factorial(y - k)
        assert falling_factorial(y, k) == exact
        via_lgamma = math.exp(math.lgamma(y + 1) - math.lgamma(y - k + 1))
        assert via_lgamma == pytest.approx(exact, rel=1e-12)


def test_umvu_examples():
    assert umvu_gaussian_moment(1, 2.5) == pytest.approx(2.5)
    assert umvu_gaussian_moment(2, 0.0) == pytest.approx(-1.0)
    assert umvu_gaussian_moment(3, 1.0) == pytest.approx(-2.0)


@pytest.mark.parametrize("i", [0, 5])
def test_umvu_order_range(i):
    with pytest.raises(UnsupportedOrderError):
        umvu_gaussian_moment(i, 0.3)


@pytest.mark.parametrize("i", [1, 2, 3, 4])
@pytest.mark.parametrize("z", [-5.0, -2.2, -0.4, 0.0, 1.0, 3.3, 5.0])
def test_umvu_matches_numerical_derivative(i, z):
    mpmath.mp.dps = 40
    f0 = lambda x: mpmath.exp(-x * x / 2) / mpmath.sqrt(2 * mpmath.pi)
    d = mpmath.diff(f0, mpmath.mpf(z), i)
    oracle = float((-1) ** i * d / f0(mpmath.mpf(z)))
    assert umvu_gaussian_moment(i, z) == pytest.approx(oracle, abs=1e-6)
