"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``.

``math.fsum`` is exactly rounded, so these sums do not depend on item order.
"""
import math

import numpy as np
from scipy import special


def compensated_sum(x) -> float:
    return math.fsum(np.asarray(x, dtype=float))


def gamma_poisson_terms(y, n, a, b, lgamma_a, psi_a, trigamma_a):
    """Parameter-dependent part of the Gamma-Poisson marginal log-likelihood.

    Returns ``(ll, d_a, d_b, d_aa, d_ab, d_bb)``: the summed log-likelihood
    (without the ``y``-only constant) and its first and second derivatives
    with respect to the shape ``a`` and rate ``b``.
    """
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    bn = b + n
    l1p = np.log1p(n / b)
    lg = special.gammaln(a + y) - lgamma_a
    dg = special.digamma(a + y) - psi_a
    tg = special.polygamma(1, a + y) - trigamma_a
    fs = math.fsum
    return (
        fs(lg - a * l1p - y * np.log(bn)),
        fs(dg - l1p),
        fs(a / b - (a + y) / bn),
        fs(tg),
        fs(n / (b * bn)),
        fs(-a / (b * b) + (a + y) / (bn * bn)),
    )
