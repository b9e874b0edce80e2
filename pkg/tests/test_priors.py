import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from socal.noise import NoiseModel
from socal.priors import (
    GammaMixturePrior,
    GammaPrior,
    GaussianMixturePrior,
    PairingError,
    conjugate_posterior,
    default_gamma_grid,
    default_gaussian_grid,
    gamma_from_log_moments,
    inverse_trigamma,
    marginal_logpdf,
    prior_log_moments,
    prior_moments,
)
from socal.simulate import quadrature_for_prior

POISSON = NoiseModel.poisson()
GAUSSIAN = NoiseModel.gaussian()
EULER = 0.5772156649015329

# quadrature of Poisson(1; 6 theta) against Gamma(2, 4), computed once with scipy.integrate.quad
NB_PMF_AT_ONE = 0.19199999999999998
# psi(10) = -gamma + H_9 and psi'(10) = pi^2/6 - sum_{k<10} 1/k^2
DIGAMMA_10 = 2.251752589066721
TRIGAMMA_10 = 0.10516633568168565


def test_gamma_validation():
    with pytest.raises(ValueError):
        GammaPrior(0.0, 1.0)
    with pytest.raises(ValueError):
        GammaPrior(1.0, -1.0)
    assert GammaPrior(2, 4).mean == 0.5
    assert GammaPrior(2, 4).variance == 0.125


def test_mixture_weights_validated():
    with pytest.raises(ValueError):
        GammaMixturePrior([1, 2], [1, 1], [0.5, 0.6])
    with pytest.raises(ValueError):
        GaussianMixturePrior([0, 1], [1, 0], [0.5, 0.5])
    with pytest.raises(ValueError):
        GammaMixturePrior([1, 2], [1, 1], [1.0])


def test_marginal_at_zero():
    assert marginal_logpdf(GammaPrior(2, 4), POISSON, 6, 0) == pytest.approx(math.log(0.16), rel=1e-14)


def test_marginal_at_one_matches_quadrature():
    assert math.exp(marginal_logpdf(GammaPrior(2, 4), POISSON, 6, 1)) == pytest.approx(NB_PMF_AT_ONE, rel=1e-12)
    assert NB_PMF_AT_ONE == pytest.approx(2 * 0.6 * 0.16, rel=1e-12)


def test_gaussian_marginal_is_convolution():
    prior = GaussianMixturePrior.single(0.0, 1.0)
    assert marginal_logpdf(prior, GAUSSIAN, 1.0, 0.0) == pytest.approx(-0.5 * math.log(4 * math.pi))


def test_pairing_errors():
    with pytest.raises(PairingError):
        marginal_logpdf(GammaPrior(1, 1), GAUSSIAN, 1.0, 0.0)
    with pytest.raises(PairingError):
        conjugate_posterior(GaussianMixturePrior.single(0, 1), POISSON, 1.0, 1)


def test_conjugate_gamma_update():
    post = conjugate_posterior(GammaPrior(2, 4), POISSON, 6, 3)
    assert (post.shape, post.rate) == (5, 10)
    assert prior_moments(post) == pytest.approx((0.5, 0.05))


def test_no_observation_returns_prior():
    prior = GammaPrior(2, 4)
    assert conjugate_posterior(prior, POISSON) == prior


def test_conjugate_normal_update():
    post = conjugate_posterior(GaussianMixturePrior.single(0.0, 1.0), GAUSSIAN, 1.0, 2.0)
    assert post.means[0] == pytest.approx(1.0)
    assert post.sds[0] == pytest.approx(math.sqrt(0.5))


def test_prior_moments_examples():
    assert prior_moments(GammaPrior(2, 4)) == pytest.approx((0.5, 0.125))
    dup = GammaMixturePrior([2, 2], [4, 4], [0.5, 0.5])
    assert prior_moments(dup) == pytest.approx((0.5, 0.125))
    mix = GammaMixturePrior([1, 4], [1, 1], [0.5, 0.5])
    assert prior_moments(mix) == pytest.approx((2.5, 4.75))


def test_mixture_moments_monte_carlo():
    rng = np.random.default_rng(11)
    n = 10**7
    pick = rng.uniform(size=n) < 0.5
    x = np.where(pick, rng.gamma(1.0, 1.0, n), rng.gamma(4.0, 1.0, n))
    m, v = prior_moments(GammaMixturePrior([1, 4], [1, 1], [0.5, 0.5]))
    se_mean = x.std() / math.sqrt(n)
    se_var = ((x - x.mean()) ** 2).std() / math.sqrt(n)
    assert abs(x.mean() - m) < 3 * se_mean
    assert abs(x.var() - v) < 3 * se_var


def test_log_moments_examples():
    assert prior_log_moments(GammaPrior(1, 1)) == pytest.approx((-EULER, math.pi**2 / 6), rel=1e-14)
    assert prior_log_moments(GammaPrior(1, math.e)) == pytest.approx((-EULER - 1, math.pi**2 / 6), rel=1e-14)
    assert prior_log_moments(GammaPrior(10, 1)) == pytest.approx((DIGAMMA_10, TRIGAMMA_10), rel=1e-13)


def test_log_moments_against_integration():
    a, b = 10.0, 1.0
    prior = GammaPrior(a, b)
    dens = lambda th: math.exp((a - 1) * math.log(th) - b * th - math.lgamma(a)) * b**a
    m = integrate.quad(lambda th: math.log(th) * dens(th), 0, np.inf, epsabs=1e-13)[0]
    v = integrate.quad(lambda th: (math.log(th) - m) ** 2 * dens(th), 0, np.inf, epsabs=1e-13)[0]
    assert prior_log_moments(prior) == pytest.approx((m, v), rel=1e-9)


@given(st.floats(0.05, 50.0), st.floats(0.01, 100.0))
def test_poisson_marginal_sums_to_one(a, b):
    prior = GammaPrior(a, b)
    n = 3.0
    mean, var = a / b * n, a / b * n + a / b**2 * n * n
    top = int(mean + 60 * math.sqrt(var) + 200)
    ys = np.arange(top + 1, dtype=float)
    total = math.fsum(np.exp(marginal_logpdf(prior, POISSON, n, ys)))
    assert abs(total - 1.0) < 1e-8


@given(st.floats(-3, 3), st.floats(0.1, 3), st.floats(0.2, 3))
def test_gaussian_marginal_integrates_to_one(m, s, sigma):
    prior = GaussianMixturePrior([m, m + 1], [s, 2 * s], [0.3, 0.7])
    f = lambda y: math.exp(marginal_logpdf(prior, GAUSSIAN, sigma, y))
    total = integrate.quad(f, -np.inf, np.inf, epsabs=1e-12, epsrel=1e-12)[0]
    assert abs(total - 1.0) < 1e-8


def test_conjugate_mean_matches_quadrature():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = float(np.exp(rng.uniform(np.log(0.3), np.log(50))))
        b = float(np.exp(rng.uniform(np.log(0.1), np.log(100))))
        n = float(np.exp(rng.uniform(np.log(0.5), np.log(200))))
        y = int(rng.poisson(a / b * n))
        post = conjugate_posterior(GammaPrior(a, b), POISSON, n, y)
        quad_mean = quadrature_for_prior(GammaPrior(a, b), POISSON, n, y)[0]
        assert post.mean == pytest.approx(quad_mean, rel=1e-8)


@given(st.lists(st.floats(0.2, 20), min_size=2, max_size=6), st.integers(0, 40), st.floats(0.5, 50))
def test_mixture_posterior_weights_sum_to_one(shapes, y, n):
    k = len(shapes)
    prior = GammaMixturePrior(shapes, np.linspace(1, 5, k), np.full(k, 1.0 / k))
    post = conjugate_posterior(prior, POISSON, n, y)
    assert abs(post.weights.sum() - 1.0) < 1e-12


@given(st.floats(0.05, 1e3), st.floats(-5, 5))
def test_log_moment_inversion_round_trip(a, log_b):
    b = math.exp(log_b)
    m, v = prior_log_moments(GammaPrior(a, b))
    back = gamma_from_log_moments(m, v)
    assert back.shape == pytest.approx(a, rel=1e-9)
    assert back.rate == pytest.approx(b, rel=1e-9)


def test_inverse_trigamma_floor_clamps():
    a, clamped = inverse_trigamma(1e12)
    assert a == pytest.approx(1e-4) and clamped
    a, clamped = inverse_trigamma(math.pi**2 / 6)
    assert a == pytest.approx(1.0, rel=1e-12) and not clamped


def test_default_grids():
    grid = default_gamma_grid(0.01)
    assert len(grid.components) == 100
    means = grid.shapes / grid.rates
    assert means.min() == pytest.approx(0.01 / 30) and means.max() == pytest.approx(0.3)
    assert np.allclose(np.diff(np.log(means)), np.log(means[1] / means[0]))
    assert np.all(grid.shapes == grid.shapes[0])
    g = default_gaussian_grid(1.0, 2.0)
    assert np.allclose(g.means, 1.0 + 2.0 * np.linspace(-3, 3, 7))
    assert np.allclose(g.sds, 1.0)


def test_priors_are_immutable():
    prior = GammaMixturePrior([1, 2], [1, 1], [0.5, 0.5])
    with pytest.raises(ValueError):
        prior.weights[0] = 1.0
