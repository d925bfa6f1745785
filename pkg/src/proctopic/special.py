"""Digamma and trigamma for positive arguments.

Both use the upward recurrence to push the argument to at least 10 and then
the Bernoulli asymptotic series. Scalar versions are numba-compiled so the
E-step kernels can call them; ``digamma``/``trigamma`` accept arrays.
"""

import math

import numba as nb
import numpy as np

_SHIFT = 10.0


@nb.njit(cache=True)
def digamma_scalar(x):
    if x <= 0.0 or x != x:
        return np.nan
    acc = 0.0
    while x < _SHIFT:
        acc -= 1.0 / x
        x += 1.0
    z = 1.0 / (x * x)
    # -sum B_2n / (2n x^2n), n = 1..7
    tail = z * (-1.0 / 12.0 + z * (1.0 / 120.0 + z * (-1.0 / 252.0 + z * (
        1.0 / 240.0 + z * (-1.0 / 132.0 + z * (691.0 / 32760.0 + z * (-1.0 / 12.0)))))))
    return acc + math.log(x) - 0.5 / x + tail


@nb.njit(cache=True)
def trigamma_scalar(x):
    if x <= 0.0 or x != x:
        return np.nan
    acc = 0.0
    while x < _SHIFT:
        acc += 1.0 / (x * x)
        x += 1.0
    z = 1.0 / (x * x)
    # 1/x + 1/(2x^2) + sum B_2n / x^(2n+1)
    tail = (1.0 / x) * z * (1.0 / 6.0 + z * (-1.0 / 30.0 + z * (1.0 / 42.0 + z * (
        -1.0 / 30.0 + z * (5.0 / 66.0 + z * (-691.0 / 2730.0 + z * (7.0 / 6.0)))))))
    return acc + 1.0 / x + 0.5 * z + tail


@nb.vectorize(["float64(float64)"], cache=True)
def _digamma_ufunc(x):
    return digamma_scalar(x)


@nb.vectorize(["float64(float64)"], cache=True)
def _trigamma_ufunc(x):
    return trigamma_scalar(x)


def digamma(x):
    """Psi(x) for x > 0; returns a float for scalar input, else an ndarray."""
    out = _digamma_ufunc(np.asarray(x, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def trigamma(x):
    out = _trigamma_ufunc(np.asarray(x, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out
