"""Posterior summaries of theta given the bin prior and the item's own response.

Two routes are provided:

* conjugate closed forms (the default route; Gamma/Poisson and
  Normal/Normal, plus mixtures of either);
* marginal-ratio identities that need only the marginal density of ``y``:
  Robbins-type moment ratios for Poisson noise and Tweedie-type cumulants
  (derivatives of the log marginal) for Gaussian noise.  Both accept a
  regularization level ``rho``; the marginal in the denominator is replaced
  by ``max(f, rho)`` so that far-tail estimates fall back to the unbiased
  frequentist ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .noise import (
    MAX_CUMULANT_ORDER,
    NoiseModel,
    UnsupportedOrderError,
    falling_factorial_array,
    umvu_gaussian_moment,
)
from .priors import (
    GammaMixturePrior,
    GammaPrior,
    GaussianMixturePrior,
    Prior,
    check_pairing,
    component_log_marginals,
    marginal_logpdf,
)

_POISSON = NoiseModel.poisson()
_GAUSSIAN = NoiseModel.gaussian()


class DivisionHazardError(ArithmeticError):
    """The marginal density underflowed to zero and no regularization was requested."""


@dataclass(frozen=True)
class Regularization:
    rho: float = 0.0

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError("rho must be nonnegative")


def _rho(reg) -> float:
    if reg is None:
        return 0.0
    if isinstance(reg, Regularization):
        return reg.rho
    return Regularization(float(reg)).rho


def _underflows(log_f):
    # f itself would be 0 in double precision, so f(y) cannot be a divisor
    with np.errstate(under="ignore"):
        return np.exp(log_f) == 0.0


def cumulants_from_moments(moments):
    """Cumulants ``k_1..k_K`` from raw moments ``m_1..m_K`` (``K <= 4``).

    ``moments`` may be a sequence of scalars or of equally shaped arrays.
    """
    m = [np.asarray(v, dtype=float) for v in moments]
    k = len(m)
    if not 1 <= k <= MAX_CUMULANT_ORDER:
        raise UnsupportedOrderError(f"cumulants only up to order {MAX_CUMULANT_ORDER}")
    out = [m[0]]
    if k >= 2:
        out.append(m[1] - m[0] ** 2)
    if k >= 3:
        out.append(m[2] - 3 * m[0] * m[1] + 2 * m[0] ** 3)
    if k >= 4:
        out.append(
            m[3] - 4 * m[0] * m[2] - 3 * m[1] ** 2 + 12 * m[0] ** 2 * m[1] - 6 * m[0] ** 4
        )
    return [o[()] if o.ndim == 0 else o for o in out]


# --- Poisson: moment ratios ---------------------------------------------------


def robbins_poisson_moment(prior: Prior, n, y, k: int, reg=None):
    """k-th posterior moment of theta from ratios of the marginal pmf.

    ``E(theta^k | y) = [y]_k / N^k + (f(y+k) [y+k]_k - f(y) [y]_k) / (N^k max(f(y), rho))``.
    With ``rho = 0`` this is the exact posterior moment under ``prior``.
    """
    if not 1 <= k <= MAX_CUMULANT_ORDER:
        raise UnsupportedOrderError(f"moment order {k} not in 1..{MAX_CUMULANT_ORDER}")
    check_pairing(prior, _POISSON)
    rho = _rho(reg)
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    lf = np.asarray(marginal_logpdf(prior, _POISSON, n, y), dtype=float)
    lf_k = np.asarray(marginal_logpdf(prior, _POISSON, n, y + k), dtype=float)
    ff_y = falling_factorial_array(y, k)
    ff_yk = falling_factorial_array(y + k, k)
    nk = n**k
    log_rho = math.log(rho) if rho > 0 else -math.inf
    if rho == 0 and np.any(_underflows(lf)):
        raise DivisionHazardError("f_G(y) underflows to 0; set rho > 0")
    unreg = lf >= log_rho
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        # the [y]_k terms cancel exactly when dividing by f(y) itself
        ratio = ff_yk * np.exp(lf_k - lf) / nk
        tail = ff_y / nk + (np.exp(lf_k) * ff_yk - np.exp(lf) * ff_y) / (nk * rho)
    out = np.where(unreg, ratio, tail)
    return out[()] if out.ndim == 0 else out


def robbins_poisson_mean_var(prior: Prior, n, y, reg=None):
    m1 = robbins_poisson_moment(prior, n, y, 1, reg)
    m2 = robbins_poisson_moment(prior, n, y, 2, reg)
    return m1, m2 - m1 * m1


# --- Gaussian: cumulants from log-marginal derivatives --------------------------


def gaussian_marginal_ratios(prior: GaussianMixturePrior, sigma, y, k_max: int):
    """``log f_G(z)`` and ``f_G^{(j)}(z) / f_G(z)`` for ``j = 1..k_max``.

    Everything is in unit-variance form: ``z = y / sigma`` and the prior is
    rescaled to ``theta / sigma``.  Derivatives are analytic: the j-th
    derivative of a normal density is a Hermite polynomial times the density.
    """
    sigma = np.asarray(sigma, dtype=float)[..., None]
    z = np.asarray(y, dtype=float)[..., None] / sigma
    mu = prior.means / sigma
    v = 1.0 + (prior.sds / sigma) ** 2
    sd = np.sqrt(v)
    u = (z - mu) / sd
    logc = -0.5 * u * u - np.log(sd) - 0.5 * math.log(2.0 * math.pi)
    with np.errstate(divide="ignore"):
        logw = logc + np.log(prior.weights)
    logf = special.logsumexp(logw, axis=-1)
    resp = np.exp(logw - logf[..., None])
    ratios = [
        np.sum(resp * (-1.0) ** j * umvu_gaussian_moment(j, u) / sd**j, axis=-1)
        for j in range(1, k_max + 1)
    ]
    return logf, ratios


def _base_cumulant(k: int, z):
    # cumulants contributed by the standard normal base density: -(log f0)^{(k)}(z),
    # written through the unbiased estimates He_j(z) of lambda^j
    d = [(-1.0) ** j * umvu_gaussian_moment(j, z) for j in range(1, k + 1)]
    return -cumulants_from_moments(d)[k - 1]


def tweedie_gaussian_cumulants(prior: GaussianMixturePrior, sigma, y, k_max: int = 2, reg=None):
    """Posterior cumulants ``k_1..k_kmax`` of theta under Gaussian noise.

    ``kappa_k(lambda | z) = -(log f0)^{(k)}(z) + p_k(f'/m, ..., f^{(k)}/m)`` with
    ``m = max(f_G(z), rho)`` and ``p_k`` the moment-to-cumulant polynomial,
    then rescaled by ``sigma**k``.  With ``rho = 0`` the second term is
    ``(log f_G)^{(k)}``.
    """
    if not 1 <= k_max <= MAX_CUMULANT_ORDER:
        raise UnsupportedOrderError(f"cumulant order {k_max} not in 1..{MAX_CUMULANT_ORDER}")
    check_pairing(prior, _GAUSSIAN)
    rho = _rho(reg)
    sigma_arr = np.asarray(sigma, dtype=float)
    z = np.asarray(y, dtype=float) / sigma_arr
    logf, ratios = gaussian_marginal_ratios(prior, sigma_arr, y, k_max)
    if rho == 0 and np.any(_underflows(logf)):
        raise DivisionHazardError("f_G(y) underflows to 0; set rho > 0")
    if rho > 0:
        shrink = np.exp(np.minimum(0.0, logf - math.log(rho)))
        ratios = [r * shrink for r in ratios]
    corr = cumulants_from_moments(ratios)
    out = []
    for k in range(1, k_max + 1):
        kappa = (_base_cumulant(k, z) + corr[k - 1]) * sigma_arr**k
        out.append(kappa[()] if np.ndim(kappa) == 0 else kappa)
    return out


# --- conjugate closed forms -----------------------------------------------------


def _gamma_raw_moments(a, b, k):
    out, acc = [], np.ones(np.broadcast(a, b).shape)
    for j in range(k):
        acc = acc * (a + j) / b
        out.append(acc)
    return out


def _normal_raw_moments(m, s, k):
    v = s * s
    out = [m, m * m + v, m**3 + 3 * m * v, m**4 + 6 * m * m * v + 3 * v * v]
    return out[:k]


def _mixture_cumulants(raw, weights, k):
    # raw[j] has shape (..., K); weights (..., K)
    return cumulants_from_moments([np.sum(weights * r, axis=-1) for r in raw[:k]])


def conjugate_cumulants(prior: Prior, noise: NoiseModel, offset=None, y=None, k_max: int = 2):
    """Cumulants of theta under the prior (``y=None``) or the conjugate posterior.

    Vectorized over ``offset`` / ``y``.
    """
    check_pairing(prior, noise)
    if isinstance(prior, GammaPrior):
        a, b = prior.shape, prior.rate
        if y is not None:
            a = a + np.asarray(y, dtype=float)
            b = b + np.asarray(offset, dtype=float)
        return cumulants_from_moments(_gamma_raw_moments(a, b, k_max))
    if y is None:
        w = prior.weights
        if isinstance(prior, GammaMixturePrior):
            raw = _gamma_raw_moments(prior.shapes, prior.rates, k_max)
        else:
            raw = _normal_raw_moments(prior.means, prior.sds, k_max)
        return _mixture_cumulants(raw, w, k_max)
    y = np.asarray(y, dtype=float)
    offset = np.asarray(offset, dtype=float)
    logc = component_log_marginals(prior, noise, offset, y)
    with np.errstate(divide="ignore"):
        logw = logc + np.log(prior.weights)
    w = np.exp(logw - special.logsumexp(logw, axis=-1, keepdims=True))
    if isinstance(prior, GammaMixturePrior):
        raw = _gamma_raw_moments(prior.shapes + y[..., None], prior.rates + offset[..., None], k_max)
    else:
        s2 = offset[..., None] ** 2
        var = 1.0 / (1.0 / prior.sds**2 + 1.0 / s2)
        mean = var * (prior.means / prior.sds**2 + y[..., None] / s2)
        raw = _normal_raw_moments(mean, np.sqrt(var), k_max)
    return _mixture_cumulants(raw, w, k_max)


# --- per-item summaries ----------------------------------------------------------


@dataclass(frozen=True)
class PosteriorSummary:
    e_prior: float
    v_prior: float
    e_post: float
    v_post: float
    k3: float | None = None
    k4: float | None = None
    flags: str = ""


def summarize_arrays(prior: Prior, noise: NoiseModel, offset, y, k_max: int = 2,
                     reg=None, verify: bool = False):
    """Column-wise summaries for items sharing one prior.

    Returns a dict with ``e_prior, v_prior, e_post, v_post`` (and ``k3``,
    ``k4`` when ``k_max`` allows) plus a ``flags`` string array.  Posterior
    values come from conjugacy; ``verify=True`` recomputes mean and variance
    through the marginal-ratio route and flags disagreements.
    """
    y = np.asarray(y, dtype=float)
    offset = np.asarray(offset, dtype=float)
    prior_k = conjugate_cumulants(prior, noise, k_max=2)
    post_k = conjugate_cumulants(prior, noise, offset, y, k_max=max(k_max, 2))
    out = {
        "e_prior": np.full(y.shape, float(prior_k[0])),
        "v_prior": np.full(y.shape, float(prior_k[1])),
        "e_post": np.broadcast_to(post_k[0], y.shape).astype(float),
        "v_post": np.broadcast_to(post_k[1], y.shape).astype(float),
    }
    if k_max >= 3:
        out["k3"] = np.broadcast_to(post_k[2], y.shape).astype(float)
    if k_max >= 4:
        out["k4"] = np.broadcast_to(post_k[3], y.shape).astype(float)
    flags = np.full(y.shape, "", dtype=object)
    if verify or _rho(reg) > 0:
        # without regularization, items whose marginal underflows keep the
        # conjugate values and are flagged instead of verified
        safe = np.ones(y.shape, dtype=bool)
        if _rho(reg) == 0:
            safe = ~_underflows(marginal_logpdf(prior, noise, offset, y))
            flags[~safe] = "division_hazard"
        m = out["e_post"].copy()
        v = out["v_post"].copy()
        if np.any(safe):
            if noise.is_poisson:
                m[safe], v[safe] = robbins_poisson_mean_var(prior, offset[safe], y[safe], reg)
            else:
                m[safe], v[safe] = tweedie_gaussian_cumulants(prior, offset[safe], y[safe], 2, reg)
        if _rho(reg) > 0:
            out["e_post"], out["v_post"] = m, v
        else:
            scale = np.abs(out["e_post"]) + np.sqrt(np.abs(out["v_post"]))
            bad = (np.abs(m - out["e_post"]) > 1e-6 * scale) | (
                np.abs(v - out["v_post"]) > 1e-6 * np.abs(out["v_post"]) + 1e-12 * scale**2
            )
            flags[bad] = "verify_mismatch"
        neg = v < 0
        flags[neg] = np.where(flags[neg] == "", "negative_variance", flags[neg] + ";negative_variance")
    out["flags"] = flags
    return out


def summarize_item(model, item, reg=None, k_max: int = 2, verify: bool = False) -> PosteriorSummary:
    """Summary for one item; ``item`` has ``y``, ``offset`` and ``t`` attributes."""
    prior = model.prior_for(item.t)
    if not item.offset > 0:
        raise ValueError("offset must be positive")
    cols = summarize_arrays(prior, model.noise, np.array([item.offset]), np.array([item.y]),
                            k_max=k_max, reg=reg, verify=verify)
    return PosteriorSummary(
        float(cols["e_prior"][0]), float(cols["v_prior"][0]),
        float(cols["e_post"][0]), float(cols["v_post"][0]),
        float(cols["k3"][0]) if "k3" in cols else None,
        float(cols["k4"][0]) if "k4" in cols else None,
        str(cols["flags"][0]),
    )
