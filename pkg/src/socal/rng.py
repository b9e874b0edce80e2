"""Counter-based (stateless) uniforms keyed by (seed, item id).

Each item's draw depends only on the seed, the item id and a stream number,
never on how many items came before it, so results are identical under any
ordering or partitioning of the items.
"""
import numpy as np
import pandas as pd

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def item_keys(ids) -> np.ndarray:
    """Stable 64-bit keys for item ids (hashed as strings)."""
    ids = np.asarray(ids, dtype=object).astype(str).astype(object)
    return pd.util.hash_array(ids, categorize=False)


def keyed_uniform(seed: int, ids, stream: int = 0) -> np.ndarray:
    """Uniform(0, 1) draws, one per id, in ``[0, 1)`` with 53 random bits."""
    keys = item_keys(ids)
    with np.errstate(over="ignore"):
        salt = _mix64(np.array([seed], dtype=np.uint64) * _GOLDEN + np.uint64(stream))
        bits = _mix64(_mix64(keys ^ salt) + _GOLDEN)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
