"""Prior families for theta | t with closed-form marginals and conjugate updates.

Gamma-family priors pair with Poisson noise (the marginal is negative
binomial); Gaussian mixtures pair with Gaussian noise.  Mixture components
are fixed once built, only the weights move during fitting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from .noise import DomainError, NoiseModel

TRIGAMMA_FLOOR = 1e-4


class PairingError(TypeError):
    """Raised when a prior is combined with the wrong noise family."""


def _as_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float).copy()
    if w.ndim != 1 or w.size < 1:
        raise ValueError("weights must be a nonempty 1-d sequence")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if abs(total - 1.0) > 1e-8:
        raise ValueError(f"weights must sum to 1 (got {total!r})")
    # kept as given: rescaling again is not idempotent in floating point and
    # would break exact model round trips
    w.flags.writeable = False
    return w


def _frozen(x) -> np.ndarray:
    a = np.array(x, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GammaPrior:
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"Gamma needs shape > 0 and rate > 0, got {self}")
        if not (math.isfinite(self.shape) and math.isfinite(self.rate)):
            raise ValueError(f"Gamma parameters must be finite, got {self}")

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    @property
    def variance(self) -> float:
        return self.shape / self.rate**2


@dataclass(frozen=True, eq=False)
class GammaMixturePrior:
    shapes: np.ndarray
    rates: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shapes", _frozen(self.shapes))
        object.__setattr__(self, "rates", _frozen(self.rates))
        object.__setattr__(self, "weights", _as_weights(self.weights))
        if not (self.shapes.shape == self.rates.shape == self.weights.shape):
            raise ValueError("shapes, rates and weights must have equal length")
        if np.any(self.shapes <= 0) or np.any(self.rates <= 0):
            raise ValueError("mixture components need positive shape and rate")

    @classmethod
    def from_components(cls, components, weights) -> "GammaMixturePrior":
        return cls(
            [c.shape for c in components], [c.rate for c in components], weights
        )

    @property
    def components(self) -> tuple[GammaPrior, ...]:
        return tuple(GammaPrior(float(a), float(b)) for a, b in zip(self.shapes, self.rates))

    def with_weights(self, weights) -> "GammaMixturePrior":
        return GammaMixturePrior(self.shapes, self.rates, weights)

    def __eq__(self, other):
        return (
            isinstance(other, GammaMixturePrior)
            and np.array_equal(self.shapes, other.shapes)
            and np.array_equal(self.rates, other.rates)
            and np.array_equal(self.weights, other.weights)
        )


@dataclass(frozen=True, eq=False)
class GaussianMixturePrior:
    means: np.ndarray
    sds: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", _frozen(self.means))
        object.__setattr__(self, "sds", _frozen(self.sds))
        object.__setattr__(self, "weights", _as_weights(self.weights))
        if not (self.means.shape == self.sds.shape == self.weights.shape):
            raise ValueError("means, sds and weights must have equal length")
        if np.any(self.sds <= 0):
            raise ValueError("mixture components need positive sd")

    @classmethod
    def single(cls, mean: float, sd: float) -> "GaussianMixturePrior":
        return cls([mean], [sd], [1.0])

    @property
    def components(self) -> tuple[tuple[float, float], ...]:
        return tuple((float(m), float(s)) for m, s in zip(self.means, self.sds))

    def with_weights(self, weights) -> "GaussianMixturePrior":
        return GaussianMixturePrior(self.means, self.sds, weights)

    def __eq__(self, other):
        return (
            isinstance(other, GaussianMixturePrior)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.sds, other.sds)
            and np.array_equal(self.weights, other.weights)
        )


Prior = Union[GammaPrior, GammaMixturePrior, GaussianMixturePrior]


def check_pairing(prior: Prior, noise: NoiseModel) -> None:
    gamma_family = isinstance(prior, (GammaPrior, GammaMixturePrior))
    if gamma_family != noise.is_poisson:
        raise PairingError(
            f"{type(prior).__name__} cannot be paired with {noise.kind.value} noise"
        )


# --- vectorized kernels -----------------------------------------------------


def gamma_poisson_logpmf(y, n, a, b):
    """Negative binomial log-pmf of ``y`` for a Gamma(a, b) rate and exposure ``n``."""
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    log_bn = np.log(b + n)
    return (
        special.gammaln(a + y)
        - special.gammaln(a)
        - special.gammaln(y + 1.0)
        + a * (np.log(b) - log_bn)
        + special.xlogy(y, n)
        - y * log_bn
    )


def _gamma_mixture_component_logpmf(prior: GammaMixturePrior, n, y):
    # (..., K) broadcast of every component marginal
    y = np.asarray(y, dtype=float)[..., None]
    n = np.asarray(n, dtype=float)[..., None]
    return gamma_poisson_logpmf(y, n, prior.shapes, prior.rates)


def _gaussian_mixture_component_logpdf(prior: GaussianMixturePrior, sigma, y):
    y = np.asarray(y, dtype=float)[..., None]
    sigma = np.asarray(sigma, dtype=float)[..., None]
    var = prior.sds**2 + sigma**2
    return -0.5 * ((y - prior.means) ** 2 / var + np.log(2.0 * np.pi * var))


def component_log_marginals(prior: Prior, noise: NoiseModel, offset, y):
    """Per-component log marginals, shape ``(..., K)``; K=1 for a single Gamma."""
    check_pairing(prior, noise)
    if isinstance(prior, GammaPrior):
        return gamma_poisson_logpmf(y, offset, prior.shape, prior.rate)[..., None]
    if isinstance(prior, GammaMixturePrior):
        return _gamma_mixture_component_logpmf(prior, offset, y)
    return _gaussian_mixture_component_logpdf(prior, offset, y)


def marginal_logpdf(prior: Prior, noise: NoiseModel, offset, y):
    """``log f_G(y)``: closed-form log marginal of ``y`` under ``prior``."""
    check_pairing(prior, noise)
    noise.validate(offset, y)
    if isinstance(prior, GammaPrior):
        out = gamma_poisson_logpmf(y, offset, prior.shape, prior.rate)
    else:
        comp = component_log_marginals(prior, noise, offset, y)
        with np.errstate(divide="ignore"):
            out = special.logsumexp(comp + np.log(prior.weights), axis=-1)
    out = np.asarray(out)
    return out[()] if out.ndim == 0 else out


def conjugate_posterior(prior: Prior, noise: NoiseModel, offset=None, y=None) -> Prior:
    """Posterior of theta after one observation; ``y=None`` means no observation."""
    check_pairing(prior, noise)
    if y is None:
        return prior
    noise.validate(offset, y)
    offset = float(offset)
    y = float(y)
    if isinstance(prior, GammaPrior):
        return GammaPrior(prior.shape + y, prior.rate + offset)
    comp = component_log_marginals(prior, noise, offset, y)
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights) + comp
    w = np.exp(logw - special.logsumexp(logw))
    w /= w.sum()
    if isinstance(prior, GammaMixturePrior):
        return GammaMixturePrior(prior.shapes + y, prior.rates + offset, w)
    prec = 1.0 / prior.sds**2 + 1.0 / offset**2
    var = 1.0 / prec
    means = var * (prior.means / prior.sds**2 + y / offset**2)
    return GaussianMixturePrior(means, np.sqrt(var), w)


def prior_moments(prior: Prior) -> tuple[float, float]:
    """Mean and variance of theta under ``prior``."""
    if isinstance(prior, GammaPrior):
        return prior.mean, prior.variance
    if isinstance(prior, GammaMixturePrior):
        m = prior.shapes / prior.rates
        v = prior.shapes / prior.rates**2
    else:
        m, v = prior.means, prior.sds**2
    w = prior.weights
    mean = float(np.dot(w, m))
    var = float(np.dot(w, v) + np.dot(w, (m - mean) ** 2))
    return mean, var


def prior_log_moments(prior) -> tuple[float, float]:
    """Mean and variance of ``log theta`` for a Gamma or Gamma mixture prior."""
    if isinstance(prior, GammaPrior):
        return (
            float(special.digamma(prior.shape) - math.log(prior.rate)),
            float(special.polygamma(1, prior.shape)),
        )
    if isinstance(prior, GammaMixturePrior):
        m = special.digamma(prior.shapes) - np.log(prior.rates)
        v = special.polygamma(1, prior.shapes)
        w = prior.weights
        mean = float(np.dot(w, m))
        return mean, float(np.dot(w, v) + np.dot(w, (m - mean) ** 2))
    raise TypeError(f"log-moments need a Gamma-family prior, got {type(prior).__name__}")


# --- trigamma inversion -----------------------------------------------------


def inverse_trigamma(v, floor: float = TRIGAMMA_FLOOR, max_iter: int = 100):
    """Solve ``trigamma(a) = v`` for ``a``.

    Newton's method on ``1 / trigamma(a)``, which is nearly linear in ``a``.
    Returns ``(a, clamped)`` where ``clamped`` marks targets whose solution
    would fall below ``floor``.
    """
    v_in = np.asarray(v, dtype=float)
    v = np.atleast_1d(v_in).ravel()
    if not np.all(np.isfinite(v) & (v > 0)):
        raise DomainError("trigamma target must be positive and finite")
    clamped = v >= special.polygamma(1, floor)
    a = np.maximum((1.0 + np.sqrt(1.0 + 4.0 * v / 3.0)) / (2.0 * v), floor)
    active = np.flatnonzero(~clamped)
    for _ in range(max_iter):
        if active.size == 0:
            break
        cur = a[active]
        tri = special.polygamma(1, cur)
        step = (1.0 / tri - 1.0 / v[active]) * tri * tri / special.polygamma(2, cur)
        new = cur + step
        new = np.where(new <= 0, cur / 2.0, new)
        a[active] = new
        active = active[np.abs(new - cur) > 1e-15 * cur]
    a[clamped] = floor
    a = a.reshape(v_in.shape)
    clamped = clamped.reshape(v_in.shape)
    return (a[()], clamped[()]) if v_in.ndim == 0 else (a, clamped)


def gamma_params_from_log_moments(mean_log, var_log):
    """Vectorized ``(shape, rate, clamped)`` with the given mean/variance of log theta."""
    a, clamped = inverse_trigamma(var_log)
    b = np.exp(special.digamma(a) - np.asarray(mean_log, dtype=float))
    return a, b, clamped


def gamma_from_log_moments(mean_log: float, var_log: float) -> GammaPrior:
    a, b, _ = gamma_params_from_log_moments(mean_log, var_log)
    return GammaPrior(float(a), float(b))


# --- default component grids ------------------------------------------------


def default_gamma_grid(center: float, n_components: int = 100, span: float = 30.0,
                       width: float = 2.0) -> GammaMixturePrior:
    """Fixed Gamma components with log-equispaced means over ``[center/span, center*span]``.

    All components share one shape, so each has the same variance of
    ``log theta``; its sd is ``width`` grid steps.  Weights start uniform.
    """
    if center <= 0:
        raise DomainError("grid center must be positive")
    if n_components == 1:
        return GammaMixturePrior([1.0], [1.0 / center], [1.0])
    step = 2.0 * math.log(span) / (n_components - 1)
    shape = float(inverse_trigamma((width * step) ** 2)[0])
    means = center * np.exp(np.linspace(-math.log(span), math.log(span), n_components))
    rates = shape / means
    return GammaMixturePrior(np.full(n_components, shape), rates,
                             np.full(n_components, 1.0 / n_components))


def default_gaussian_grid(center: float, spread: float, n_components: int = 7,
                          reach: float = 3.0, width: float = 0.5) -> GaussianMixturePrior:
    """Fixed normal components at ``center + spread * linspace(-reach, reach, K)``.

    Component sd is ``width`` grid spacings.
    """
    if spread <= 0:
        raise DomainError("grid spread must be positive")
    if n_components == 1:
        return GaussianMixturePrior.single(center, spread)
    offsets = np.linspace(-reach, reach, n_components)
    sd = width * spread * (offsets[1] - offsets[0])
    return GaussianMixturePrior(center + spread * offsets, np.full(n_components, sd),
                                np.full(n_components, 1.0 / n_components))
