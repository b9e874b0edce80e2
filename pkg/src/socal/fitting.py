"""Per-bin maximum marginal likelihood fits of the prior G.

Each bin is fit independently of every other bin.  Items are put in a
canonical order before any reduction, so a fit depends only on the multiset
of (y, offset) pairs in the bin and not on how the items arrived.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from . import kernels
from .binning import BinSpec, assign_bin
from .noise import NoiseModel
from .priors import (
    GammaMixturePrior,
    GammaPrior,
    GaussianMixturePrior,
    Prior,
    component_log_marginals,
    default_gamma_grid,
    default_gaussian_grid,
)

LOG_SHAPE_BOUNDS = (math.log(1e-4), math.log(1e8))
LOG_RATE_BOUNDS = (math.log(1e-300), math.log(1e300))
INIT_SHAPE_RANGE = (1e-2, 1e4)


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class BinFit:
    """Outcome of fitting one bin.

    ``status`` is one of ``"converged"``, ``"boundary"`` (the likelihood
    maximum sits on the edge of the parameter space), ``"max_iter"`` or
    ``"failed"``.
    """

    bin: int
    prior: Prior | None
    loglik: float
    iterations: int
    converged: bool
    n_items: int
    status: str = "converged"
    trace: tuple = field(default=(), repr=False, compare=False)


@dataclass(frozen=True)
class Family:
    """Which prior family to fit: ``gamma``, ``gamma-mixture`` or ``gaussian-mixture``."""

    kind: str = "gamma"
    components: int = 1

    def __post_init__(self):
        if self.kind not in ("gamma", "gamma-mixture", "gaussian-mixture"):
            raise ValueError(f"unknown prior family {self.kind!r}")
        if self.components < 1:
            raise ValueError("need at least one mixture component")

    @classmethod
    def parse(cls, text: str) -> "Family":
        """Parse ``"gamma"``, ``"gamma-mixture:100"`` or ``"gaussian-mixture:7"``."""
        kind, _, k = text.partition(":")
        if kind == "gamma":
            return cls("gamma", 1)
        default = 100 if kind == "gamma-mixture" else 7
        return cls(kind, int(k) if k else default)

    def __str__(self):
        return self.kind if self.kind == "gamma" else f"{self.kind}:{self.components}"


def _canonical(y, offset):
    y = np.ascontiguousarray(y, dtype=float)
    offset = np.ascontiguousarray(offset, dtype=float)
    order = np.lexsort((offset, y))
    return np.ascontiguousarray(y[order]), np.ascontiguousarray(offset[order])


class GammaPoissonObjective:
    """Marginal log-likelihood of a Gamma prior under Poisson noise, in (log a, log b)."""

    def __init__(self, y, n, backend=None):
        self.y, self.n = _canonical(y, n)
        self.kernels = backend or kernels
        self.const = self.kernels.compensated_sum(
            special.xlogy(self.y, self.n) - special.gammaln(self.y + 1.0)
        )

    def __call__(self, x, derivatives: bool = True):
        a, b = math.exp(x[0]), math.exp(x[1])
        ll, da, db, daa, dab, dbb = self.kernels.gamma_poisson_terms(
            self.y, self.n, a, b,
            float(special.gammaln(a)), float(special.digamma(a)),
            float(special.polygamma(1, a)),
        )
        ll += self.const
        if not derivatives:
            return ll
        grad = np.array([a * da, b * db])
        hess = np.array([
            [a * a * daa + a * da, a * b * dab],
            [a * b * dab, b * b * dbb + b * db],
        ])
        return ll, grad, hess


def _moment_start(y, n):
    total_n = n.sum()
    m = y.sum() / total_n
    r = y / n
    v_total = np.dot(n, (r - m) ** 2) / total_n
    v_theta = v_total - m * y.size / total_n
    a = m * m / v_theta if v_theta > 0 else INIT_SHAPE_RANGE[1]
    a = min(max(a, INIT_SHAPE_RANGE[0]), INIT_SHAPE_RANGE[1])
    return np.array([math.log(a), math.log(a / m)])


def _ascent_step(grad, hess):
    # Newton step on a negative definite Hessian; otherwise use |eigenvalues|
    w, v = np.linalg.eigh(hess)
    if np.all(w < 0):
        return -np.linalg.solve(hess, grad)
    scale = np.maximum(np.abs(w), 1e-8 * max(np.abs(w).max(), 1.0))
    return v @ ((v.T @ grad) / scale)


def _clip(x):
    return np.array([
        min(max(x[0], LOG_SHAPE_BOUNDS[0]), LOG_SHAPE_BOUNDS[1]),
        min(max(x[1], LOG_RATE_BOUNDS[0]), LOG_RATE_BOUNDS[1]),
    ])


def _degenerate_fit(y, n, t_center, bin_index):
    eps = 1e-2 * t_center if t_center and t_center > 0 else 1e-2 / n.sum()
    mean = float(eps + y.sum() / n.sum())
    prior = GammaPrior(0.5, 0.5 / mean)
    obj = GammaPoissonObjective(y, n)
    ll = obj(np.log([prior.shape, prior.rate]), derivatives=False)
    return BinFit(bin_index, prior, ll, 0, False, int(y.size), "boundary")


def fit_gamma_mml(y, offset, t_center: float | None = None, bin_index: int = 0,
                  max_iter: int = 200, rtol: float = 1e-10, xtol: float = 1e-8,
                  backend=None) -> BinFit:
    """Gamma prior maximizing the negative binomial marginal likelihood of one bin.

    Newton's method in ``(log a, log b)`` with step halving; a bounded
    Nelder-Mead search takes over if Newton stalls away from a stationary
    point.  All-zero bins have no finite maximizer and get the fixed
    ``Gamma(0.5, 0.5 / (eps + sum y / sum N))`` with ``eps = 0.01 * t_center``.
    """
    y = np.asarray(y, dtype=float)
    n = np.asarray(offset, dtype=float)
    if y.size == 0:
        raise FitError("empty bin")
    if np.any(n <= 0):
        raise FitError("offsets must be positive")
    if not np.any(y > 0):
        return _degenerate_fit(y, n, t_center, bin_index)

    obj = GammaPoissonObjective(y, n, backend)
    x = _clip(_moment_start(obj.y, obj.n))
    ll, grad, hess = obj(x)
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        step = _ascent_step(grad, hess)
        big = np.abs(step).max()
        if big > 5.0:
            step *= 5.0 / big
        lam = 1.0
        while True:
            x_new = _clip(x + lam * step)
            ll_new = obj(x_new, derivatives=False)
            if ll_new >= ll or lam < 1e-12:
                break
            lam *= 0.5
        moved = np.abs(x_new - x).max()
        if ll_new < ll:
            # no ascent possible at machine precision
            status = "converged" if np.abs(step).max() < 1e-6 else "stalled"
            break
        change = abs(ll_new - ll) / max(abs(ll), 1.0)
        x = x_new
        ll, grad, hess = obj(x)
        if change < rtol and moved < xtol:
            status = "converged"
            break
    if x[0] >= LOG_SHAPE_BOUNDS[1] or x[0] <= LOG_SHAPE_BOUNDS[0]:
        status = "boundary"
    elif status == "stalled":
        res = optimize.minimize(
            lambda z: -obj(z, derivatives=False), x, method="Nelder-Mead",
            bounds=[LOG_SHAPE_BOUNDS, LOG_RATE_BOUNDS],
            options={"xatol": xtol, "fatol": rtol * max(abs(ll), 1.0), "maxiter": 2000},
        )
        if -res.fun >= ll:
            x, ll = res.x, -res.fun
        status = "converged" if res.success else "failed"
        it += res.nit
    prior = GammaPrior(math.exp(x[0]), math.exp(x[1]))
    return BinFit(bin_index, prior, float(ll), it, status == "converged", int(y.size), status)


def fit_mixture_em(y, offset, prior: GammaMixturePrior | GaussianMixturePrior,
                   noise: NoiseModel, bin_index: int = 0, tol: float = 1e-10,
                   max_iter: int = 500) -> BinFit:
    """EM for the weights of a mixture with fixed components.

    The returned fit carries the log-likelihood after every iteration in
    ``trace`` (the first entry is at the starting weights).
    """
    y, offset = _canonical(y, offset)
    if y.size == 0:
        raise FitError("empty bin")
    logc = component_log_marginals(prior, noise, offset, y)
    rowmax = logc.max(axis=1, keepdims=True)
    dens = np.exp(logc - rowmax)
    base = kernels.compensated_sum(rowmax.ravel())
    w = np.array(prior.weights, dtype=float)
    n_items = y.size

    def loglik(f):
        with np.errstate(divide="ignore"):
            return kernels.compensated_sum(np.log(f)) + base

    f = dens @ w
    ll = loglik(f)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = w * (dens.T @ (1.0 / f)) / n_items
        w /= w.sum()
        f = dens @ w
        ll_new = loglik(f)
        trace.append(ll_new)
        done = abs(ll_new - ll) < tol
        ll = ll_new
        if done:
            converged = True
            break
    status = "converged" if converged else "max_iter"
    return BinFit(bin_index, prior.with_weights(w), float(ll), it, converged,
                  int(n_items), status, tuple(trace))


def initial_mixture(family: Family, y, offset, t) -> GammaMixturePrior | GaussianMixturePrior:
    """Fixed component grid for one bin, with uniform starting weights."""
    y = np.asarray(y, dtype=float)
    offset = np.asarray(offset, dtype=float)
    t = np.asarray(t, dtype=float)
    if family.kind == "gamma-mixture":
        center = float(np.exp(np.mean(np.log(t))))
        return default_gamma_grid(center, family.components)
    center = float(np.mean(y))
    excess = float(np.var(y) - np.mean(offset**2))
    spread = math.sqrt(max(excess, 0.01 * float(np.var(y)), 1e-12))
    return default_gaussian_grid(center, spread, family.components)


def fit_bin(y, offset, t, family: Family, noise: NoiseModel, bin_index: int = 0) -> BinFit:
    try:
        if family.kind == "gamma":
            if not noise.is_poisson:
                raise FitError("gamma family requires Poisson noise")
            t_center = float(np.mean(t)) if len(t) else None
            return fit_gamma_mml(y, offset, t_center=t_center, bin_index=bin_index)
        start = initial_mixture(family, y, offset, t)
        return fit_mixture_em(y, offset, start, noise, bin_index=bin_index)
    except (FitError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return BinFit(bin_index, None, float("nan"), 0, False, int(len(y)), f"failed: {exc}")


def _fit_bin_args(args):
    return fit_bin(*args)


def fit_all_bins(y, offset, t, spec: BinSpec, family: Family, noise: NoiseModel,
                 workers: int = 1) -> list[BinFit]:
    """Fit every bin independently; results are ordered by bin index.

    ``workers > 1`` fits bins in separate processes.  Output does not depend
    on the number of workers.
    """
    y = np.asarray(y, dtype=float)
    offset = np.asarray(offset, dtype=float)
    t = np.asarray(t, dtype=float)
    bins = assign_bin(spec, t)
    order = np.argsort(bins, kind="stable")
    starts = np.searchsorted(bins[order], np.arange(spec.count + 1))
    jobs = []
    for j in range(spec.count):
        idx = order[starts[j]:starts[j + 1]]
        jobs.append((y[idx], offset[idx], t[idx], family, noise, j))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(_fit_bin_args, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        fits = [_fit_bin_args(job) for job in jobs]
    return fits
