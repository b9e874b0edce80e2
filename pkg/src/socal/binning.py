"""Partition items into bins of (approximately) constant base estimate ``t``."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class BinningError(ValueError):
    pass


class BinningWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class BinSpec:
    """Bin ``j`` is the half-open interval ``(boundaries[j-1], boundaries[j]]``."""

    boundaries: np.ndarray
    weighting: str = "items"

    def __post_init__(self):
        b = np.array(self.boundaries, dtype=float).ravel()
        if b.size and not np.all(np.diff(b) > 0):
            raise BinningError("bin boundaries must be strictly increasing")
        if not np.all(np.isfinite(b)):
            raise BinningError("bin boundaries must be finite")
        b.flags.writeable = False
        object.__setattr__(self, "boundaries", b)

    @property
    def count(self) -> int:
        return self.boundaries.size + 1

    def __eq__(self, other):
        return (
            isinstance(other, BinSpec)
            and self.weighting == other.weighting
            and np.array_equal(self.boundaries, other.boundaries)
        )


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(np.isnan(t)):
        raise BinningError("t contains NaN")
    return t


def build_bins(t, n_bins: int, weights=None, weighting: str = "items") -> BinSpec:
    """Weighted-quantile bins of ``t``.

    With ``weights=None`` every item counts once (equal-item bins).  Cut ``j``
    goes where the cumulative weight of the sorted items is closest to
    ``j / n_bins`` of the total, at the midpoint between adjacent distinct
    ``t``.  Tied values always share a bin, so fewer than ``n_bins`` bins can
    come back (a :class:`BinningWarning` is issued).
    """
    t = _check_t(t)
    if n_bins < 1:
        raise BinningError("need at least one bin")
    if t.size == 0:
        raise BinningError("no items to bin")
    order = np.argsort(t, kind="stable")
    ts = t[order]
    if weights is None:
        w = np.ones_like(ts)
    else:
        w = np.asarray(weights, dtype=float)[order]
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise BinningError("weights must be finite and nonnegative")
    cum = np.cumsum(w)
    total = cum[-1]
    if not total > 0:
        raise BinningError("total weight must be positive")

    targets = total * np.arange(1, n_bins) / n_bins
    idx = np.searchsorted(cum, targets, side="left")
    # a block of tied t values is never split: cut before or after the block,
    # whichever lands closer to the target (after it on a tie)
    first = np.searchsorted(ts, ts[idx], side="left")
    last = np.searchsorted(ts, ts[idx], side="right") - 1
    before = np.where(first > 0, cum[np.maximum(first - 1, 0)], -np.inf)
    use_before = (first > 0) & (np.abs(before - targets) < np.abs(cum[last] - targets))
    idx = np.where(use_before, first - 1, last)
    idx = idx[idx < ts.size - 1]
    cuts = np.unique(0.5 * (ts[idx] + ts[idx + 1]))
    # every bin must hold at least one item
    below = np.searchsorted(ts, cuts, side="right")
    keep = (below > np.concatenate(([0], below[:-1]))) & (below < ts.size)
    cuts = cuts[keep]
    if cuts.size + 1 < n_bins:
        warnings.warn(
            f"reduced bin count from {n_bins} to {cuts.size + 1} (ties or too few distinct t)",
            BinningWarning,
            stacklevel=2,
        )
    return BinSpec(cuts, weighting)


def assign_bin(spec: BinSpec, t):
    """Bin index of each ``t``; a ``t`` equal to a boundary goes to the lower bin."""
    t = _check_t(t)
    out = np.searchsorted(spec.boundaries, t, side="left")
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BinDiagnostics:
    count: np.ndarray
    weight: np.ndarray
    mean_log_t: np.ndarray
    sd_log_t: np.ndarray


def bin_diagnostics(spec: BinSpec, t, weights=None) -> BinDiagnostics:
    """Per-bin item count, weight sum, and mean / sd of ``log t`` (``t > 0``)."""
    t = _check_t(t)
    bins = assign_bin(spec, t)
    B = spec.count
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=float)
    count = np.bincount(bins, minlength=B)
    wsum = np.bincount(bins, weights=w, minlength=B)
    with np.errstate(divide="ignore", invalid="ignore"):
        lt = np.log(t)
        s1 = np.bincount(bins, weights=lt, minlength=B)
        mean = s1 / count
        dev = lt - mean[bins]
        var = np.bincount(bins, weights=dev * dev, minlength=B) / count
    return BinDiagnostics(count, wsum, mean, np.sqrt(var))


def default_bin_count(n_items: int) -> int:
    if n_items >= 1_000_000:
        return 1000
    return max(10, n_items // 1000)
