"""Item container and the delimited item file format.

An item file is comma-separated text with a header row and the columns
``id, y, offset, t``.  A ``theta_true`` column (simulation truth) is read or
written only when explicitly requested.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .noise import NoiseModel

COLUMNS = ("id", "y", "offset", "t")
TRUTH_COLUMN = "theta_true"
MAX_REJECT_FRACTION = 0.01


class InputError(ValueError):
    """Unreadable or malformed input (CLI exit code 2)."""


@dataclass
class Items:
    id: np.ndarray
    y: np.ndarray
    offset: np.ndarray
    t: np.ndarray
    theta: np.ndarray | None = None

    def __post_init__(self):
        self.id = np.asarray(self.id, dtype=object)
        self.y = np.asarray(self.y, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if self.theta is not None:
            self.theta = np.asarray(self.theta, dtype=float)
        n = self.id.size
        if not (self.y.size == self.offset.size == self.t.size == n):
            raise InputError("item columns must have equal length")

    def __len__(self):
        return self.id.size

    def subset(self, index) -> "Items":
        return Items(
            self.id[index], self.y[index], self.offset[index], self.t[index],
            None if self.theta is None else self.theta[index],
        )

    @classmethod
    def from_arrays(cls, y, offset, t, theta=None, ids=None) -> "Items":
        y = np.asarray(y, dtype=float)
        if ids is None:
            ids = np.arange(y.size).astype(str)
        return cls(ids, y, offset, t, theta)


def row_problems(items: Items, noise: NoiseModel) -> np.ndarray:
    """Per-row rejection reason (empty string for a valid row)."""
    reason = np.full(len(items), "", dtype=object)
    bad_t = ~np.isfinite(items.t)
    if noise.is_poisson:
        bad_t |= ~(items.t > 0)
    reason[bad_t] = "bad_t"
    reason[~np.isfinite(items.y)] = "bad_y"
    if noise.is_poisson:
        with np.errstate(invalid="ignore"):
            bad_count = (items.y < 0) | (items.y != np.floor(items.y))
        reason[bad_count & (reason == "")] = "bad_y"
    reason[~(items.offset > 0)] = "bad_offset"
    return reason


def read_items(path, with_truth: bool = False) -> Items:
    try:
        frame = pd.read_csv(path, dtype={"id": str}, keep_default_na=True,
                            float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise InputError("no items") from None
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    missing = [c for c in COLUMNS if c not in frame.columns]
    if missing:
        raise InputError(f"missing columns: {', '.join(missing)}")
    if with_truth and TRUTH_COLUMN not in frame.columns:
        raise InputError(f"missing column {TRUTH_COLUMN}")
    if len(frame) == 0:
        raise InputError("no items")
    numeric = {c: pd.to_numeric(frame[c], errors="coerce").to_numpy(dtype=float)
               for c in ("y", "offset", "t")}
    theta = None
    if with_truth:
        theta = pd.to_numeric(frame[TRUTH_COLUMN], errors="coerce").to_numpy(dtype=float)
    ids = frame["id"].fillna("").to_numpy(dtype=object)
    return Items(ids, numeric["y"], numeric["offset"], numeric["t"], theta)


def write_items(path, items: Items, with_truth: bool = False) -> None:
    cols = {"id": items.id, "y": items.y, "offset": items.offset, "t": items.t}
    if with_truth:
        if items.theta is None:
            raise ValueError("items carry no truth column")
        cols[TRUTH_COLUMN] = items.theta
    frame = pd.DataFrame(cols)
    if np.all(items.y == np.floor(items.y)):
        frame["y"] = items.y.astype(np.int64)
    frame.to_csv(path, index=False, float_format="%.17g")


def screen(items: Items, noise: NoiseModel, max_reject_fraction: float = MAX_REJECT_FRACTION):
    """Split off malformed rows.

    Returns ``(valid_items, reasons)`` where ``reasons`` covers every input
    row.  Raises :class:`InputError` when the input is empty or more than
    ``max_reject_fraction`` of the rows are rejected.
    """
    if len(items) == 0:
        raise InputError("no items")
    reasons = row_problems(items, noise)
    bad = reasons != ""
    if bad.sum() > max_reject_fraction * len(items):
        raise InputError(
            f"{int(bad.sum())} of {len(items)} rows rejected (cap {max_reject_fraction:.0%})"
        )
    if bad.all():
        raise InputError("no valid items")
    return items.subset(~bad), reasons
