"""Backend selection for the hot loops.

The compiled extension is used when it is importable; setting the
environment variable ``SOCAL_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SOCAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

compensated_sum = _impl.compensated_sum
gamma_poisson_terms = _impl.gamma_poisson_terms


def get_backend(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"`` (for tests and benchmarks)."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
