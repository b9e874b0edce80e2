"""Randomized PIT fit checks and held-out evaluation metrics.

The PIT value of a response under a predictive distribution is
``p = P(Y <= y) - u * P(Y = y)`` with ``u ~ Uniform(0, 1)``; p is uniform
exactly when the predictive distribution is right.  The ``u`` draws are
keyed by (seed, item id), so reports do not depend on item order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import special, stats

from . import kernels
from .items import InputError, Items
from .model import CalibrationModel
from .noise import NoiseModel
from .priors import (
    GammaMixturePrior,
    GammaPrior,
    GaussianMixturePrior,
    Prior,
    component_log_marginals,
)
from .rng import keyed_uniform

DEFAULT_CELLS = 50


def pit_value(dist, y, u):
    """Randomized PIT of ``y`` under a frozen scipy distribution."""
    cdf = dist.cdf(y)
    if isinstance(dist.dist, stats.rv_discrete):
        cdf = cdf - u * dist.pmf(y)
    return np.clip(cdf, 0.0, 1.0)


def ks_critical(n, alpha: float = 0.01):
    """Asymptotic Kolmogorov-Smirnov critical value ``K_alpha / sqrt(n)``."""
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore"):
        return special.kolmogi(alpha) / np.sqrt(n)


def ks_uniform(p) -> float:
    """KS distance between the sample ``p`` and Uniform(0, 1)."""
    p = np.sort(np.asarray(p, dtype=float))
    n = p.size
    if n == 0:
        return float("nan")
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - p), np.max(p - (i - 1) / n)))


def _nb_cdf_pmf(a, b, n, y):
    p = b / (b + n)
    return stats.nbinom.cdf(y, a, p), stats.nbinom.pmf(y, a, p)


def predictive_cdf_pmf(prior: Prior, offset, y):
    """CDF and point mass at ``y`` of the marginal of ``prior`` (per item)."""
    offset = np.asarray(offset, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(prior, GammaPrior):
        return _nb_cdf_pmf(prior.shape, prior.rate, offset, y)
    if isinstance(prior, GammaMixturePrior):
        cdf, pmf = _nb_cdf_pmf(prior.shapes, prior.rates, offset[:, None], y[:, None])
        return cdf @ prior.weights, pmf @ prior.weights
    if isinstance(prior, GaussianMixturePrior):
        scale = np.sqrt(prior.sds**2 + offset[:, None] ** 2)
        cdf = stats.norm.cdf(y[:, None], prior.means, scale)
        return cdf @ prior.weights, np.zeros(y.shape)
    raise TypeError(f"no predictive for {type(prior).__name__}")


@dataclass
class PitReport:
    """Per-bin PIT histograms (``cells`` equal cells on [0, 1]) and KS distances."""

    counts: np.ndarray  # (bins, cells)
    n: np.ndarray
    ks: np.ndarray  # NaN for empty bins
    skipped: int = 0
    flagged: int = 0
    min_offset: float = 0.0

    @property
    def cells(self) -> int:
        return self.counts.shape[1]

    def critical(self, alpha: float = 0.01) -> np.ndarray:
        return ks_critical(self.n, alpha)

    def rejects(self, alpha: float = 0.01) -> np.ndarray:
        """Per-bin rejection of uniformity (False for empty bins)."""
        return np.where(self.n > 0, self.ks > self.critical(alpha), False)

    def fraction_within(self, alpha: float = 0.01, min_n: int = 1) -> float:
        use = self.n >= max(min_n, 1)
        return float(np.mean(~self.rejects(alpha)[use])) if use.any() else float("nan")

    def fraction_rejected(self, alpha: float = 0.01, min_n: int = 1) -> float:
        use = self.n >= max(min_n, 1)
        return float(np.mean(self.rejects(alpha)[use])) if use.any() else float("nan")

    def pooled(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def to_frame(self) -> pd.DataFrame:
        B, H = self.counts.shape
        return pd.DataFrame({
            "bin": np.repeat(np.arange(B), H),
            "cell": np.tile(np.arange(H), B),
            "count": self.counts.ravel(),
            "expected": np.repeat(self.n / H, H),
            "ks": np.repeat(self.ks, H),
            "n": np.repeat(self.n, H),
        })


def _histogram_report(p, bins, n_bins, cells, skipped=0, flagged=0, min_offset=0.0):
    p = np.asarray(p, dtype=float)
    cell = np.minimum((p * cells).astype(np.int64), cells - 1)
    counts = np.zeros((n_bins, cells), dtype=np.int64)
    np.add.at(counts, (bins, cell), 1)
    n = counts.sum(axis=1)
    ks = np.full(n_bins, np.nan)
    order = np.argsort(bins, kind="stable")
    starts = np.searchsorted(bins[order], np.arange(n_bins + 1))
    for j in range(n_bins):
        if n[j]:
            ks[j] = ks_uniform(p[order[starts[j]:starts[j + 1]]])
    return PitReport(counts, n, ks, skipped, flagged, min_offset)


def _pit_by_bin(priors, bins, offset, y, u):
    p = np.empty(y.size)
    order = np.argsort(bins, kind="stable")
    starts = np.searchsorted(bins[order], np.arange(len(priors) + 1))
    for j, prior in enumerate(priors):
        idx = order[starts[j]:starts[j + 1]]
        if idx.size:
            cdf, pmf = predictive_cdf_pmf(prior, offset[idx], y[idx])
            p[idx] = np.clip(cdf - u[idx] * pmf, 0.0, 1.0)
    return p


def marginal_pit_values(model: CalibrationModel, items: Items, seed: int = 0) -> np.ndarray:
    u = keyed_uniform(seed, items.id)
    return _pit_by_bin(model.priors, model.bins(items.t), items.offset, items.y, u)


def marginal_pit_report(model: CalibrationModel, items: Items, seed: int = 0,
                        cells: int = DEFAULT_CELLS, min_offset: float = 0.0) -> PitReport:
    """PIT of each item's response under its bin's marginal distribution.

    Items with ``offset < min_offset`` are left out of the histograms.
    """
    keep = items.offset >= min_offset
    sub = items.subset(keep)
    p = marginal_pit_values(model, sub, seed)
    return _histogram_report(p, model.bins(sub.t), model.spec.count, cells,
                             skipped=int((~keep).sum()), min_offset=min_offset)


def _match(train: Items, test: Items) -> np.ndarray:
    index = pd.Index(train.id)
    if not index.is_unique:
        raise InputError("train ids are not unique")
    return index.get_indexer(test.id)


def _posterior_predictive_pit(prior: Prior, y_tr, n_tr, has_train, n_te, y_te, u):
    if isinstance(prior, GammaPrior):
        a = prior.shape + np.where(has_train, y_tr, 0.0)
        b = prior.rate + np.where(has_train, n_tr, 0.0)
        cdf, pmf = _nb_cdf_pmf(a, b, n_te, y_te)
    elif isinstance(prior, GammaMixturePrior):
        y0 = np.where(has_train, y_tr, 0.0)
        n0 = np.where(has_train, n_tr, 1.0)
        logc = component_log_marginals(prior, NoiseModel.poisson(), n0, y0)
        with np.errstate(divide="ignore"):
            logw = np.log(prior.weights) + np.where(has_train[:, None], logc, 0.0)
        w = np.exp(logw - special.logsumexp(logw, axis=1, keepdims=True))
        a = prior.shapes + y0[:, None] * has_train[:, None]
        b = prior.rates + n0[:, None] * has_train[:, None]
        cdf, pmf = _nb_cdf_pmf(a, b, n_te[:, None], y_te[:, None])
        cdf, pmf = (w * cdf).sum(axis=1), (w * pmf).sum(axis=1)
    else:
        raise ValueError("predictive PIT is defined for the Poisson path only")
    return np.clip(cdf - u * pmf, 0.0, 1.0)


def predictive_pit_report(model: CalibrationModel, train: Items, test: Items, seed: int = 0,
                          cells: int = DEFAULT_CELLS, min_offset: float = 0.0) -> PitReport:
    """PIT of held-out responses under the posterior predictive from training data.

    Test items with zero exposure are skipped; test items without a training
    counterpart are scored under the bin prior and counted as flagged.
    """
    if not model.noise.is_poisson:
        raise ValueError("predictive PIT is defined for the Poisson path only")
    where = _match(train, test)
    has_train = where >= 0
    take = np.where(has_train, where, 0)
    keep = (test.offset > 0) & (test.offset >= min_offset)
    skipped = int((~keep).sum())
    flagged = int((~has_train & keep).sum())
    idx = np.flatnonzero(keep)
    u = keyed_uniform(seed, test.id[idx])
    bins = model.bins(test.t[idx])
    p = np.empty(idx.size)
    order = np.argsort(bins, kind="stable")
    starts = np.searchsorted(bins[order], np.arange(model.spec.count + 1))
    for j, prior in enumerate(model.priors):
        sel = order[starts[j]:starts[j + 1]]
        if sel.size == 0:
            continue
        it = idx[sel]
        p[sel] = _posterior_predictive_pit(
            prior, train.y[take[it]], train.offset[take[it]], has_train[it],
            test.offset[it], test.y[it], u[sel],
        )
    return _histogram_report(p, bins, model.spec.count, cells, skipped, flagged, min_offset)


def poisson_loglik_terms(theta_hat, offset, y):
    mu = np.asarray(theta_hat, dtype=float) * offset
    return special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)


def _bin_sums(values, bins, n_bins):
    order = np.argsort(bins, kind="stable")
    starts = np.searchsorted(bins[order], np.arange(n_bins + 1))
    v = np.ascontiguousarray(values[order], dtype=float)
    return np.array([kernels.compensated_sum(v[starts[j]:starts[j + 1]])
                     for j in range(n_bins)])


def _lift(ll, base):
    with np.errstate(divide="ignore", invalid="ignore"):
        return 100.0 * (ll - base) / np.abs(base)


def test_loglik_lift(model: CalibrationModel, train: Items, test: Items,
                     truth=None) -> pd.DataFrame:
    """Held-out Poisson log-likelihood per bin for t, E(theta|t) and E(theta|t,y).

    Rows are bins plus a final ``overall`` row; ``lift_*`` columns are
    percentage changes against the t plug-in.  ``truth`` adds the oracle
    ``theta`` as a further method.
    """
    if not model.noise.is_poisson:
        raise ValueError("log-likelihood lift is defined for the Poisson path only")
    where = _match(train, test)
    if np.any(where < 0) or len(train) != len(test):
        raise InputError("train and test items must carry the same ids")
    tr = train.subset(where)
    scored = model.score(tr)
    bins = scored["bin"]
    B = model.spec.count
    methods = {"t": test.t, "prior": scored["e_prior"], "post": scored["e_post"]}
    if truth is not None:
        methods["truth"] = np.asarray(truth, dtype=float)
    frame = pd.DataFrame({"bin": np.arange(B).astype(object),
                          "n": np.bincount(bins, minlength=B)})
    overall = {"bin": "overall", "n": len(test)}
    for name, theta in methods.items():
        terms = poisson_loglik_terms(theta, test.offset, test.y)
        per_bin = _bin_sums(terms, bins, B)
        frame[f"ll_{name}"] = per_bin
        overall[f"ll_{name}"] = kernels.compensated_sum(np.ascontiguousarray(per_bin))
    for name in methods:
        if name != "t":
            frame[f"lift_{name}"] = _lift(frame[f"ll_{name}"], frame["ll_t"])
            overall[f"lift_{name}"] = float(_lift(overall[f"ll_{name}"], overall["ll_t"]))
    return pd.concat([frame, pd.DataFrame([overall])], ignore_index=True)


# not a test case despite the name
test_loglik_lift.__test__ = False


@dataclass
class GainReport:
    r2: float
    var_total: float
    var_between: float
    mean_within: float
    gain: np.ndarray  # per bin; NaN where a bin has no items
    mean_gain: float
    degenerate: bool


def explained_fraction(var_between: float, mean_within: float) -> tuple[float, bool]:
    """``R^2 = 1 - E[Var(theta|t)] / (Var[E(theta|t)] + E[Var(theta|t)])``.

    Returns ``(r2, degenerate)``; a zero total variance gives ``r2 = 1``.
    """
    total = var_between + mean_within
    if not total > 0:
        return 1.0, True
    return 1.0 - mean_within / total, False


def r_squared_and_gain(model: CalibrationModel, items: Items, weights=None) -> GainReport:
    """Explained-variance fraction of E(theta|t) and the per-bin variance gain.

    ``R^2 = 1 - E[Var(theta|t)] / Var(theta)`` with the total variance from
    the conditional variance identity over items.  The gain of a bin is the
    ``weights``-weighted mean of Var(theta|t,y) divided by Var(theta|t);
    ``weights`` are typically the held-out offsets.
    """
    scored = model.score(items)
    bins = scored["bin"]
    e_prior, v_prior, v_post = scored["e_prior"], scored["v_prior"], scored["v_post"]
    B = model.spec.count
    # E(theta|t) is constant within a bin: take its item-weighted variance
    # over bin values, which is exactly zero when only one bin is occupied
    count = np.bincount(bins, minlength=B)
    occupied = count > 0
    bin_mean = np.bincount(bins, weights=e_prior, minlength=B)[occupied] / count[occupied]
    if bin_mean.size > 1:
        var_between = float(np.average((bin_mean - np.average(bin_mean, weights=count[occupied])) ** 2,
                                       weights=count[occupied]))
    else:
        var_between = 0.0
    mean_within = float(np.mean(v_prior))
    var_total = var_between + mean_within
    r2, degenerate = explained_fraction(var_between, mean_within)
    w = np.ones(len(items)) if weights is None else np.asarray(weights, dtype=float)
    wsum = np.bincount(bins, weights=w, minlength=B)
    num = np.bincount(bins, weights=w * v_post, minlength=B)
    vp = np.bincount(bins, weights=v_prior, minlength=B) / np.maximum(
        np.bincount(bins, minlength=B), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(wsum > 0, num / wsum / vp, np.nan)
    mean_gain = float(np.nanmean(gain)) if np.any(np.isfinite(gain)) else float("nan")
    return GainReport(r2, var_total, var_between, mean_within, gain, mean_gain, degenerate)


def coverage_ratio(e_post, v_post, theta, bins, n_bins: int):
    """Per-bin mean of ``(E(theta|t,y) - theta)^2 / Var(theta|t,y)`` and the
    mean of those over nonempty bins."""
    z = (np.asarray(e_post) - np.asarray(theta)) ** 2 / np.asarray(v_post)
    count = np.bincount(bins, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_bin = np.bincount(bins, weights=z, minlength=n_bins) / count
    return per_bin, float(np.nanmean(per_bin[count > 0]))


def mse(estimate, theta) -> float:
    d = np.asarray(estimate, dtype=float) - np.asarray(theta, dtype=float)
    return float(np.mean(d * d))


def evaluation_table(model: CalibrationModel, train: Items, test: Items, truth=None) -> pd.DataFrame:
    """Per-bin and overall evaluation: likelihood lifts, variance gain, R^2,
    and, when ``truth`` is given, squared errors and the coverage ratio."""
    frame = test_loglik_lift(model, train, test, truth)
    tr = train.subset(_match(train, test))
    gains = r_squared_and_gain(model, tr, weights=test.offset)
    B = model.spec.count
    frame["gain"] = np.append(gains.gain, gains.mean_gain)
    frame["r2"] = np.append(np.full(B, np.nan), gains.r2)
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        scored = model.score(tr)
        bins = scored["bin"]
        per_bin, overall = coverage_ratio(scored["e_post"], scored["v_post"], truth, bins, B)
        frame["coverage"] = np.append(per_bin, overall)
        count = np.maximum(np.bincount(bins, minlength=B), 1)
        for name, est in (("t", test.t), ("prior", scored["e_prior"]), ("post", scored["e_post"])):
            sq = (np.asarray(est) - truth) ** 2
            frame[f"mse_{name}"] = np.append(np.bincount(bins, weights=sq, minlength=B) / count,
                                             np.mean(sq))
    return frame
