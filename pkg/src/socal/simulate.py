"""Synthetic benchmarks and brute-force posterior oracles.

Two generators: a lognormal-Poisson click-through simulation where the true
rate scatters lognormally around the score, and a Gaussian simulation where
the score is a cross-fitted linear regression on a model with a hidden
quadratic term and Laplace noise.  Both return :class:`Items` carrying the
true theta.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .items import Items
from .noise import NoiseModel, log_noise_density
from .priors import (
    GammaMixturePrior,
    GammaPrior,
    GaussianMixturePrior,
    Prior,
    gamma_params_from_log_moments,
    marginal_logpdf,
)


class GridError(ValueError):
    pass


def lognormal_to_gamma(mu_log: float, sigma_log: float) -> GammaPrior:
    """Gamma distribution with the same mean and variance of ``log theta``."""
    if not sigma_log > 0:
        raise ValueError("sigma_log must be positive")
    a, b, _ = gamma_params_from_log_moments(mu_log, sigma_log**2)
    return GammaPrior(float(a), float(b))


def lognormal_to_gamma_params(mu_log, sigma_log):
    """Vectorized :func:`lognormal_to_gamma` returning ``(shape, rate)`` arrays."""
    mu_log = np.asarray(mu_log, dtype=float)
    a, b, _ = gamma_params_from_log_moments(mu_log, np.full(mu_log.shape, float(sigma_log) ** 2))
    return a, b


@dataclass(frozen=True)
class CtrSimConfig:
    """Lognormal-Poisson simulation: ``log theta ~ N(log t + delta, sigma^2)``.

    ``family="gamma"`` draws theta from the log-moment-matched Gamma instead
    of the lognormal, which makes the Gamma prior family exactly right.
    """

    delta: float = 0.0
    sigma: float = 0.5
    n_items: int = 100_000
    t_low: float = 1e-4
    t_high: float = 1e-1
    offset_mean: float = 30.0
    seed: int = 0
    family: str = "lognormal"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n_items < 1:
            raise ValueError("need at least one item")
        if not 0 < self.t_low <= self.t_high:
            raise ValueError("need 0 < t_low <= t_high")
        if not self.offset_mean >= 1:
            raise ValueError("offset_mean must be at least 1")
        if self.family not in ("lognormal", "gamma"):
            raise ValueError(f"unknown theta family {self.family!r}")


def simulate_ctr(config: CtrSimConfig) -> Items:
    """Items with ``t ~ logUniform``, ``N ~ Geometric`` (N >= 1) and Poisson clicks."""
    rng = np.random.Generator(np.random.Philox(config.seed))
    n = config.n_items
    t = np.exp(rng.uniform(math.log(config.t_low), math.log(config.t_high), n))
    if config.t_low == config.t_high:
        t[:] = config.t_low
    offset = rng.geometric(1.0 / config.offset_mean, n).astype(float)
    mu = np.log(t) + config.delta
    if config.family == "lognormal":
        theta = np.exp(mu + config.sigma * rng.standard_normal(n))
    else:
        a, b = lognormal_to_gamma_params(mu, config.sigma)
        theta = rng.gamma(a, 1.0 / b)
    y = rng.poisson(theta * offset).astype(float)
    return Items.from_arrays(y, offset, t, theta)


def true_ctr_posterior(config: CtrSimConfig, items: Items):
    """Per-item (E(theta|t), Var(theta|t), E(theta|t,y), Var(theta|t,y)) under
    the Gamma approximation of the generating lognormal."""
    a, b = lognormal_to_gamma_params(np.log(items.t) + config.delta, config.sigma)
    if config.family == "lognormal":
        e_prior = items.t * math.exp(config.delta + config.sigma**2 / 2)
        v_prior = e_prior**2 * math.expm1(config.sigma**2)
    else:
        e_prior, v_prior = a / b, a / b**2
    a_post, b_post = a + items.y, b + items.offset
    return e_prior, v_prior, a_post / b_post, a_post / b_post**2


def thin_split(items: Items, fraction: float = 0.9, seed: int = 0) -> tuple[Items, Items]:
    """Split every item's exposure: ``y_train ~ Binomial(y, fraction)``,
    ``N_train = fraction * N``; the test part gets the remainder."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    rng = np.random.Generator(np.random.Philox(seed))
    y_train = rng.binomial(items.y.astype(np.int64), fraction).astype(float)
    train = Items(items.id, y_train, fraction * items.offset, items.t, items.theta)
    test = Items(items.id, items.y - y_train, (1.0 - fraction) * items.offset,
                 items.t, items.theta)
    return train, test


@dataclass(frozen=True)
class NormalSimConfig:
    """``theta = x'beta + (x'gamma)^2 + eps``, ``y ~ N(theta, noise_sd^2)``.

    Coefficients are nonzero with probability ``1 - sparsity``; ``eps`` is
    Laplace with variance ``laplace_var``.  ``t`` is the prediction of an OLS
    fit of y on x trained on the other folds.
    """

    n_items: int = 100_000
    dim: int = 10
    sparsity: float = 0.95
    beta_scale: float = 1.0
    gamma_scale: float = 0.1
    laplace_var: float = 2.0
    noise_sd: float = 1.0
    folds: int = 5
    seed: int = 0
    zero_beta: bool = False
    zero_gamma: bool = False
    zero_eps: bool = False

    def __post_init__(self):
        if self.n_items < 1 or self.dim < 1 or self.folds < 2:
            raise ValueError("need n_items >= 1, dim >= 1 and folds >= 2")
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity must be in [0, 1)")
        if not (self.noise_sd > 0 and self.laplace_var >= 0):
            raise ValueError("noise_sd must be positive and laplace_var nonnegative")


@dataclass
class NormalSimulation:
    items: Items
    x: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    fold: np.ndarray
    fold_coefs: np.ndarray  # (folds, dim + 1), intercept first


def _sparse_normal(rng, dim, sparsity, scale):
    keep = rng.uniform(size=dim) >= sparsity
    return np.where(keep, scale * rng.standard_normal(dim), 0.0)


def simulate_normal_quadratic(config: NormalSimConfig) -> NormalSimulation:
    rng = np.random.Generator(np.random.Philox(config.seed))
    n, d = config.n_items, config.dim
    beta = _sparse_normal(rng, d, config.sparsity, config.beta_scale)
    gamma = _sparse_normal(rng, d, config.sparsity, config.gamma_scale)
    if config.zero_beta:
        beta[:] = 0.0
    if config.zero_gamma:
        gamma[:] = 0.0
    x = rng.standard_normal((n, d))
    eps = rng.laplace(0.0, math.sqrt(config.laplace_var / 2.0), n)
    if config.zero_eps:
        eps[:] = 0.0
    theta = x @ beta + (x @ gamma) ** 2 + eps
    y = theta + config.noise_sd * rng.standard_normal(n)
    fold = rng.permutation(np.arange(n) % config.folds)
    counts = np.bincount(fold, minlength=config.folds)
    if np.any(n - counts < d + 1):
        raise ValueError("each training split needs more items than dim + 1")
    design = np.column_stack([np.ones(n), x])
    t = np.empty(n)
    coefs = np.empty((config.folds, d + 1))
    for k in range(config.folds):
        held = fold == k
        coefs[k] = np.linalg.lstsq(design[~held], y[~held], rcond=None)[0]
        t[held] = design[held] @ coefs[k]
    items = Items.from_arrays(y, np.full(n, config.noise_sd), t, theta)
    return NormalSimulation(items, x, beta, gamma, fold, coefs)


def grid_oracle_means(theta_pool, y, sigma, n_cells: int = 2000):
    """E(theta | y) when theta follows the empirical distribution of ``theta_pool``.

    The pool is histogrammed onto ``n_cells`` equal cells (cell centers as
    atoms) before the Bayes update under ``y ~ N(theta, sigma^2)``.
    """
    theta_pool = np.asarray(theta_pool, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)
    lo, hi = theta_pool.min(), theta_pool.max()
    if hi <= lo:
        return np.full(y.shape, lo)
    counts, edges = np.histogram(theta_pool, bins=n_cells, range=(lo, hi))
    keep = counts > 0
    atoms = 0.5 * (edges[:-1] + edges[1:])[keep]
    logw = np.log(counts[keep] / counts.sum())
    out = np.empty(y.shape)
    for start in range(0, y.size, 2048):
        sl = slice(start, start + 2048)
        z = (y[sl, None] - atoms[None, :]) / sigma[sl, None]
        lp = logw[None, :] - 0.5 * z * z
        lp -= lp.max(axis=1, keepdims=True)
        p = np.exp(lp)
        out[sl] = (p @ atoms) / p.sum(axis=1)
    return out


def prior_log_density(prior: Prior):
    """Log density evaluator ``theta -> log g(theta)`` for a prior."""
    if isinstance(prior, GammaPrior):
        return lambda th: stats.gamma.logpdf(th, prior.shape, scale=1.0 / prior.rate)
    if isinstance(prior, GammaMixturePrior):
        def logpdf(th):
            th = np.asarray(th, dtype=float)[..., None]
            lp = stats.gamma.logpdf(th, prior.shapes, scale=1.0 / prior.rates)
            return special.logsumexp(lp, b=prior.weights, axis=-1)
        return logpdf
    if isinstance(prior, GaussianMixturePrior):
        def logpdf(th):
            th = np.asarray(th, dtype=float)[..., None]
            lp = stats.norm.logpdf(th, prior.means, prior.sds)
            return special.logsumexp(lp, b=prior.weights, axis=-1)
        return logpdf
    raise TypeError(f"no density for {type(prior).__name__}")


def quadrature_posterior(log_prior, noise: NoiseModel, offset: float, y: float,
                         lo: float, hi: float, n_nodes: int = 200_001,
                         log_spaced: bool | None = None):
    """Posterior (mean, variance, k3, k4) by trapezoid quadrature on [lo, hi].

    Log-spaced nodes (the default for Poisson noise) integrate in
    ``log theta`` with the Jacobian folded into the weights.
    """
    if log_spaced is None:
        log_spaced = noise.is_poisson
    if log_spaced:
        if not 0 < lo < hi:
            raise GridError("log-spaced grid needs 0 < lo < hi")
        u = np.linspace(math.log(lo), math.log(hi), n_nodes)
        theta = np.exp(u)
        jac = u
    else:
        if not lo < hi:
            raise GridError("need lo < hi")
        theta = np.linspace(lo, hi, n_nodes)
        jac = None
    with np.errstate(divide="ignore", under="ignore"):
        logw = log_prior(theta) + log_noise_density(noise, theta, offset, y)
    if jac is not None:
        logw = logw + jac
    if np.any(np.isnan(logw)) or not np.any(np.isfinite(logw)):
        raise GridError("non-finite integrand")
    logw[0] -= math.log(2.0)
    logw[-1] -= math.log(2.0)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = float(np.dot(w, theta))
    d = theta - mean
    m2, m3, m4 = (float(np.dot(w, d**k)) for k in (2, 3, 4))
    return mean, m2, m3, m4 - 3.0 * m2 * m2


def default_grid(prior: Prior, noise: NoiseModel, offset: float, y: float,
                 tail: float = 1e-16) -> tuple[float, float]:
    """Integration range covering the prior and likelihood bulk of one item."""
    if noise.is_poisson:
        if isinstance(prior, GammaPrior):
            shapes, rates = np.array([prior.shape]), np.array([prior.rate])
        elif isinstance(prior, GammaMixturePrior):
            shapes, rates = prior.shapes, prior.rates
        else:
            raise TypeError("Poisson grid needs a Gamma-family prior")
        p_lo = stats.gamma.ppf(tail, shapes, scale=1.0 / rates).min()
        p_hi = stats.gamma.isf(tail, shapes, scale=1.0 / rates).max()
        l_lo = 1e-3 * (y + 1.0) / offset
        l_hi = (y + 20.0 * math.sqrt(y + 1.0) + 20.0) / offset
        return max(min(p_lo, l_lo), 1e-300), max(p_hi, l_hi)
    if not isinstance(prior, GaussianMixturePrior):
        raise TypeError("Gaussian grid needs a Gaussian mixture prior")
    lo = min(float(np.min(prior.means - 12 * prior.sds)), y - 12 * offset)
    hi = max(float(np.max(prior.means + 12 * prior.sds)), y + 12 * offset)
    return lo, hi


def quadrature_for_prior(prior: Prior, noise: NoiseModel, offset: float, y: float,
                         n_nodes: int = 200_001):
    lo, hi = default_grid(prior, noise, offset, y)
    return quadrature_posterior(prior_log_density(prior), noise, offset, y, lo, hi, n_nodes)


def marginal_check_sum(prior: Prior, offset: float, y_max: int) -> float:
    """Sum of the Poisson-path marginal pmf over ``y = 0..y_max``."""
    ys = np.arange(y_max + 1, dtype=float)
    return float(np.exp(marginal_logpdf(prior, NoiseModel.poisson(), offset, ys)).sum())
