"""Exponentially scaled modified Bessel functions of the first kind.

``bessel_I(n, x)`` returns ``exp(-x) * I_n(x)`` for ``n`` in {0, 1}: power
series up to ``x = 15``, Hankel's asymptotic expansion beyond. Higher orders,
needed only occasionally, come from Miller's backward recurrence normalized
by the order-0 value.
"""

import math

import numpy as np
from numba import njit, vectorize

SERIES_CUTOFF = 15.0


@njit(cache=True)
def _series(n, x):
    # e^{-x} sum_k (x/2)^{2k+n} / (k! (k+n)!)
    half = 0.5 * x
    term = 1.0
    for i in range(1, n + 1):
        term *= half / i
    total = term
    q = half * half
    k = 0
    while True:
        k += 1
        term *= q / (k * (k + n))
        total += term
        if term < 1e-17 * total:
            break
    return total * math.exp(-x)


@njit(cache=True)
def _asymptotic(n, x):
    # e^{-x} I_n(x) ~ (2 pi x)^{-1/2} sum_k (-1)^k a_k(n) / x^k
    mu4 = 4.0 * n * n
    term = 1.0
    total = 1.0
    prev = 1.0
    k = 0
    while True:
        k += 1
        odd = 2 * k - 1
        term *= -(mu4 - odd * odd) / (8.0 * k * x)
        if abs(term) > abs(prev) or abs(term) < 1e-17 * abs(total):
            break
        total += term
        prev = term
    return total / math.sqrt(2.0 * math.pi * x)


@njit(cache=True)
def i0e(x):
    if x <= SERIES_CUTOFF:
        return _series(0, x)
    return _asymptotic(0, x)


@njit(cache=True)
def i1e(x):
    if x == 0.0:
        return 0.0
    if x <= SERIES_CUTOFF:
        return _series(1, x)
    return _asymptotic(1, x)


@vectorize(["float64(float64)"], cache=True)
def _i0e_ufunc(x):
    return i0e(x)


@vectorize(["float64(float64)"], cache=True)
def _i1e_ufunc(x):
    return i1e(x)


def bessel_I(n, x):
    """``exp(-x) * I_n(x)`` for ``n`` in {0, 1} and ``x >= 0``."""
    if n not in (0, 1):
        raise ValueError(f"only orders 0 and 1 are supported, got {n}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise ValueError("argument must be non-negative")
    out = _i0e_ufunc(x) if n == 0 else _i1e_ufunc(x)
    return float(out) if out.ndim == 0 else out


@njit(cache=True)
def _orders(m_max, x, out):
    if x == 0.0:
        out[:] = 0.0
        out[0] = 1.0
        return
    start = m_max + int(math.sqrt(40.0 * (m_max + 1.0))) + int(x) + 20
    nxt, cur = 0.0, 1e-300
    for k in range(start, 0, -1):
        prev = nxt + (2.0 * k / x) * cur
        nxt, cur = cur, prev
        if k - 1 <= m_max:
            out[k - 1] = cur
        if abs(cur) > 1e250:
            nxt *= 1e-250
            cur *= 1e-250
            for i in range(k - 1, m_max + 1):
                out[i] *= 1e-250
    scale = i0e(x) / out[0]
    for i in range(m_max + 1):
        out[i] *= scale


def bessel_I_orders(m_max: int, x: float) -> np.ndarray:
    """``exp(-x) * I_m(x)`` for ``m = 0..m_max`` (Miller's algorithm)."""
    if x < 0:
        raise ValueError("argument must be non-negative")
    out = np.zeros(m_max + 1)
    _orders(int(m_max), float(x), out)
    return out
