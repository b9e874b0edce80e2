# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.  Mirrors ``socal._kernels_py`` exactly in API."""

import numpy as np

from libc.math cimport lgamma, log, log1p
from scipy.special.cython_special cimport psi

DEF SMALL_COUNT = 64


cdef inline double _trigamma_large(double x) noexcept nogil:
    # asymptotic series, accurate to ~1e-17 relative for x >= SMALL_COUNT
    cdef double r = 1.0 / x
    cdef double r2 = r * r
    return r + r2 * (0.5 + r * (1.0 / 6.0 + r2 * (-1.0 / 30.0 + r2 * (1.0 / 42.0
               + r2 * (-1.0 / 30.0 + r2 * (5.0 / 66.0))))))


cdef struct Acc:
    double s
    double c


cdef inline void _add(Acc* acc, double x) noexcept nogil:
    # Neumaier compensated summation
    cdef double t = acc.s + x
    if abs(acc.s) >= abs(x):
        acc.c += (acc.s - t) + x
    else:
        acc.c += (x - t) + acc.s
    acc.s = t


def compensated_sum(const double[::1] x):
    cdef Acc acc
    acc.s = 0.0
    acc.c = 0.0
    cdef Py_ssize_t i
    with nogil:
        for i in range(x.shape[0]):
            _add(&acc, x[i])
    return acc.s + acc.c


def gamma_poisson_terms(const double[::1] y, const double[::1] n, double a, double b,
                        double lgamma_a, double psi_a, double trigamma_a):
    """Parameter-dependent part of the Gamma-Poisson marginal log-likelihood.

    Returns ``(ll, d_a, d_b, d_aa, d_ab, d_bb)``: the summed log-likelihood
    (without the ``y``-only constant) and its first and second derivatives
    with respect to the shape ``a`` and rate ``b``.
    """
    cdef Py_ssize_t i, j, m = y.shape[0]
    cdef Acc acc[6]
    cdef double yi, ni, bn, lg, dg, tg, x, inv
    cdef double log_b = log(b)
    for j in range(6):
        acc[j].s = 0.0
        acc[j].c = 0.0
    with nogil:
        for i in range(m):
            yi = y[i]
            ni = n[i]
            bn = b + ni
            lg = 0.0
            dg = 0.0
            tg = 0.0
            if yi < SMALL_COUNT:
                for j in range(<Py_ssize_t>yi):
                    x = a + j
                    inv = 1.0 / x
                    lg += log(x)
                    dg += inv
                    tg -= inv * inv
            else:
                lg = lgamma(a + yi) - lgamma_a
                dg = psi(a + yi) - psi_a
                tg = _trigamma_large(a + yi) - trigamma_a
            _add(&acc[0], lg - a * log1p(ni / b) - yi * log(bn))
            _add(&acc[1], dg - log1p(ni / b))
            _add(&acc[2], a / b - (a + yi) / bn)
            _add(&acc[3], tg)
            _add(&acc[4], ni / (b * bn))
            _add(&acc[5], -a / (b * b) + (a + yi) / (bn * bn))
    return tuple(acc[j].s + acc[j].c for j in range(6))
