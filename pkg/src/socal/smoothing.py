"""Cross-bin smoothing of the fitted priors.

Per-bin curves are smoothed against the bin abscissa with a weighted
local-linear (tricube kernel) regression, then each bin's prior is adjusted
to hit the smoothed values.  On the Poisson path the curves are the mean and
variance of ``log theta``, so the adjusted priors stay on the positive axis.
On the Gaussian path they are the mean and variance of ``theta`` itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.optimize import isotonic_regression

from .fitting import BinFit
from .priors import (
    GammaMixturePrior,
    GammaPrior,
    GaussianMixturePrior,
    Prior,
    gamma_params_from_log_moments,
    prior_log_moments,
    prior_moments,
)


USABLE_STATUS = ("converged", "max_iter")


class SmoothingError(ValueError):
    pass


@dataclass(frozen=True)
class CurvePair:
    """Per-bin location and spread curves over an increasing abscissa."""

    abscissa: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        for name in ("abscissa", "mean", "var"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.abscissa.shape == self.mean.shape == self.var.shape):
            raise SmoothingError("curve arrays must have equal length")


def tricube(u):
    u = np.abs(u)
    return np.where(u < 1.0, (1.0 - u**3) ** 3, 0.0)


def local_linear(x, values, weights, bandwidth: float, chunk: int = 256) -> np.ndarray:
    """Weighted local-linear fit evaluated at every ``x``.

    Points whose kernel window holds fewer than two weighted abscissae fall
    back to the local weighted mean; empty windows are widened until they
    catch a weighted point.  Windows at the ends are truncated.
    """
    x = np.asarray(x, dtype=float)
    values = np.asarray(values, dtype=float)
    weights = np.where(np.isfinite(values), np.asarray(weights, dtype=float), 0.0)
    values = np.where(weights > 0, values, 0.0)
    if not np.any(weights > 0):
        raise SmoothingError("nothing to smooth: all weights are zero")
    if not bandwidth > 0:
        raise SmoothingError("bandwidth must be positive")
    out = np.empty_like(x)
    for start in range(0, x.size, chunk):
        x0 = x[start:start + chunk, None]
        h = np.full(x0.shape, float(bandwidth))
        while True:
            d = x[None, :] - x0
            k = weights[None, :] * tricube(d / h)
            s0 = k.sum(axis=1, keepdims=True)
            empty = s0 <= 0
            if not np.any(empty):
                break
            h = np.where(empty, 2.0 * h, h)
        s1 = (k * d).sum(axis=1, keepdims=True)
        s2 = (k * d * d).sum(axis=1, keepdims=True)
        t0 = (k * values).sum(axis=1, keepdims=True)
        t1 = (k * d * values).sum(axis=1, keepdims=True)
        det = s0 * s2 - s1 * s1
        ok = det > 1e-12 * s0 * s2
        with np.errstate(divide="ignore", invalid="ignore"):
            lin = (s2 * t0 - s1 * t1) / det
        out[start:start + chunk] = np.where(ok, lin, t0 / s0).ravel()
    return out


def smooth_curves(raw: CurvePair, bandwidth: float, weights, monotone: bool = False) -> CurvePair:
    """Smooth the mean curve and the log of the variance curve.

    Bins with zero weight (e.g. non-converged fits) get values from their
    neighbours.  ``monotone=True`` additionally projects the smoothed mean
    onto nondecreasing sequences (pool adjacent violators).
    """
    if raw.abscissa.size < 2:
        raise SmoothingError("need at least two bins to smooth")
    if np.any(np.diff(raw.abscissa) <= 0):
        raise SmoothingError("abscissa must be strictly increasing")
    weights = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_var = np.log(raw.var)
    usable = np.isfinite(raw.mean) & np.isfinite(log_var)
    w = np.where(usable, weights, 0.0)
    mean = local_linear(raw.abscissa, raw.mean, w, bandwidth)
    var = np.exp(local_linear(raw.abscissa, log_var, w, bandwidth))
    if monotone:
        mean = isotonic_regression(mean, weights=np.maximum(w, 1e-12)).x
    return CurvePair(raw.abscissa, mean, var)


def raw_curves(fits: list[BinFit], abscissa) -> tuple[CurvePair, np.ndarray]:
    """Per-bin curves from the fitted priors and their smoothing weights.

    Gamma-family fits report log-scale moments; Gaussian mixtures report
    moments of theta.  Weight is the item count for fits that converged or
    ran out of iterations at a valid point; boundary and failed fits get 0.
    """
    B = len(fits)
    mean = np.full(B, np.nan)
    var = np.full(B, np.nan)
    weights = np.zeros(B)
    for j, fit in enumerate(fits):
        if fit.prior is None:
            continue
        if isinstance(fit.prior, GaussianMixturePrior):
            mean[j], var[j] = prior_moments(fit.prior)
        else:
            mean[j], var[j] = prior_log_moments(fit.prior)
        if fit.status in USABLE_STATUS:
            weights[j] = fit.n_items
    return CurvePair(abscissa, mean, var), weights


def adjust_prior(prior: Prior, target_mean: float, target_var: float) -> tuple[Prior, bool]:
    """Move ``prior`` onto the target moments; returns ``(prior, clamped)``.

    Gamma: re-solve (shape, rate) for the target mean and variance of
    ``log theta``.  Gamma mixture: apply the affine map in log space that
    takes the mixture's log-moments to the targets to every component and
    re-solve each component.  Gaussian mixture: affine map of theta itself.
    """
    if not target_var > 0:
        raise SmoothingError("target variance must be positive")
    if isinstance(prior, GammaPrior):
        a, b, clamped = gamma_params_from_log_moments(target_mean, target_var)
        return GammaPrior(float(a), float(b)), bool(clamped)
    if isinstance(prior, GammaMixturePrior):
        m_now, v_now = prior_log_moments(prior)
        s = math.sqrt(target_var / v_now)
        c = target_mean - s * m_now
        comp_m = special.digamma(prior.shapes) - np.log(prior.rates)
        comp_v = special.polygamma(1, prior.shapes)
        a, b, clamped = gamma_params_from_log_moments(s * comp_m + c, s * s * comp_v)
        return GammaMixturePrior(a, b, prior.weights), bool(np.any(clamped))
    if isinstance(prior, GaussianMixturePrior):
        m_now, v_now = prior_moments(prior)
        s = math.sqrt(target_var / v_now)
        c = target_mean - s * m_now
        return GaussianMixturePrior(s * prior.means + c, s * prior.sds, prior.weights), False
    raise TypeError(f"cannot adjust {type(prior).__name__}")


adjust_prior_to_log_moments = adjust_prior
