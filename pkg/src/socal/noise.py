"""Observation families and the frequentist pieces used by the posterior formulas.

Two families are supported:

* ``POISSON``: ``y | theta ~ Poisson(theta * N)`` with a known exposure ``N``.
* ``GAUSSIAN``: ``y | theta ~ Normal(theta, sigma**2)`` with a known scale.

Gaussian observations are handled in unit-variance form (``z = y / sigma``,
``lambda = theta / sigma``) wherever a fixed base density is needed, so the
base density is always the standard normal.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import hermite_e
from scipy import special

MAX_CUMULANT_ORDER = 4

_LOG_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Raised when an argument is outside the family's support."""


class UnsupportedOrderError(ValueError):
    """Raised for moment/cumulant orders above ``MAX_CUMULANT_ORDER``."""


class NoiseKind(str, enum.Enum):
    POISSON = "poisson"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class NoiseModel:
    """A known observation family; the per-item offset is ``N`` or ``sigma``."""

    kind: NoiseKind

    @classmethod
    def poisson(cls) -> "NoiseModel":
        return cls(NoiseKind.POISSON)

    @classmethod
    def gaussian(cls) -> "NoiseModel":
        return cls(NoiseKind.GAUSSIAN)

    @property
    def is_poisson(self) -> bool:
        return self.kind is NoiseKind.POISSON

    def validate(self, offset, y) -> None:
        """Raise :class:`DomainError` unless every (offset, y) pair is admissible."""
        offset = np.asarray(offset, dtype=float)
        y = np.asarray(y, dtype=float)
        if not np.all(offset > 0):
            raise DomainError("offset must be positive")
        if self.is_poisson:
            if not np.all((y >= 0) & (y == np.floor(y))):
                raise DomainError("Poisson responses must be nonnegative integers")
        elif not np.all(np.isfinite(y)):
            raise DomainError("Gaussian responses must be finite")


def log_noise_density(model: NoiseModel, theta, offset, y):
    """Return ``log f_theta(y)`` (vectorized over all arguments)."""
    model.validate(offset, y)
    theta = np.asarray(theta, dtype=float)
    offset = np.asarray(offset, dtype=float)
    y = np.asarray(y, dtype=float)
    if model.is_poisson:
        if not np.all(theta > 0):
            raise DomainError("Poisson rate must be positive")
        mu = theta * offset
        out = special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)
    else:
        z = (y - theta) / offset
        out = -0.5 * z * z - np.log(offset) - 0.5 * _LOG_2PI
    return out[()] if out.ndim == 0 else out


def falling_factorial(y: int, k: int) -> int:
    """``[y]_k = y (y-1) ... (y-k+1)``; zero whenever ``k > y``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > y:
        return 0
    return math.prod(range(y - k + 1, y + 1))


def falling_factorial_array(y, k: int) -> np.ndarray:
    """Float version of :func:`falling_factorial` for arrays of counts."""
    y = np.asarray(y, dtype=float)
    out = np.ones_like(y)
    for j in range(k):
        out = out * np.maximum(y - j, 0.0)
    return out


def umvu_gaussian_moment(i: int, z):
    """UMVU estimate of ``lambda**i`` from one standard-normal-noise observation.

    Equals ``(-1)**i f0^{(i)}(z) / f0(z)``, the probabilists' Hermite polynomial
    ``He_i(z)``.
    """
    if not 1 <= i <= MAX_CUMULANT_ORDER:
        raise UnsupportedOrderError(f"order {i} not in 1..{MAX_CUMULANT_ORDER}")
    coef = np.zeros(i + 1)
    coef[i] = 1.0
    return hermite_e.hermeval(z, coef)
