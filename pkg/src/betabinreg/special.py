"""Scalar special functions used by the likelihood and its derivatives.

The digamma/trigamma routines shift the argument above a threshold with the
recurrence relations and then apply the asymptotic (Stirling-type) series.
``log_rising`` and the ``_digamma_diff``/``_trigamma_diff`` kernels evaluate differences of
the form f(x + m) - f(x) without cancellation when x is large; the
beta-binomial likelihood is made almost entirely of such differences.

All ``_``-prefixed functions are numba-compiled scalar kernels that skip
argument checking; they are shared with :mod:`betabinreg.model`.
"""

import math

import numpy as np
from numba import njit

__all__ = [
    "log_gamma",
    "log_beta",
    "digamma",
    "trigamma",
    "log_choose",
    "log_rising",
    "chi2_sf",
]

_SHIFT = 10.0



def _check_positive(name, x):
    arr = np.asarray(x, dtype=float)
    if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} requires positive finite arguments, got {x!r}")
    return arr


@njit(cache=True)
def _stirling_tail(y):
    # lgamma(y) - [(y - 1/2) log y - y + log(2 pi)/2]
    inv = 1.0 / y
    inv2 = inv * inv
    return inv * (
        1.0 / 12 - inv2 * (1.0 / 360 - inv2 * (1.0 / 1260 - inv2 * (1.0 / 1680 - inv2 / 1188)))
    )


@njit(cache=True)
def _log_rising(x, m):
    """log Gamma(x + m) - log Gamma(x) for x > 0, m >= 0."""
    if m == 0.0:
        return 0.0
    if x < _SHIFT:
        return math.lgamma(x + m) - math.lgamma(x)
    y = x + m
    return (x - 0.5) * math.log1p(m / x) + m * math.log(y) - m + (_stirling_tail(y) - _stirling_tail(x))


@njit(cache=True)
def _log1p_minus(t):
    # log(1 + t) - t, summed as a series where the two terms nearly cancel
    if not t <= 0.5:
        return math.log1p(t) - t
    term = -t
    total = 0.0
    k = 2.0
    power = t
    while True:
        power *= -t
        term = power / k
        total += term
        if abs(term) <= 1e-17 * abs(total):
            break
        k += 1.0
    return total


@njit(cache=True)
def _log_rising_excess(x, m):
    """log Gamma(x + m) - log Gamma(x) - m log x for x > 0, m >= 0.

    Tends to zero as x grows with m fixed; computed without forming the
    O(m log x) pieces that would otherwise cancel.
    """
    if m == 0.0:
        return 0.0
    if x < _SHIFT:
        return math.lgamma(x + m) - math.lgamma(x) - m * math.log(x)
    t = m / x
    return x * _log1p_minus(t) + (m - 0.5) * math.log1p(t) + (_stirling_tail(x + m) - _stirling_tail(x))


@njit(cache=True)
def _psi_tail(y):
    # digamma(y) - [log y - 1/(2y)]
    inv = 1.0 / y
    inv2 = inv * inv
    return -inv2 * (
        1.0 / 12
        - inv2
        * (
            1.0 / 120
            - inv2
            * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * 691.0 / 32760)))
        )
    )


@njit(cache=True)
def _digamma_diff(x, m):
    """digamma(x + m) - digamma(x) for x > 0, m >= 0."""
    if m == 0.0:
        return 0.0
    if x < _SHIFT:
        return _digamma(x + m) - _digamma(x)
    y = x + m
    return math.log1p(m / x) + 0.5 * m / (x * y) + (_psi_tail(y) - _psi_tail(x))


@njit(cache=True)
def _trigamma_tail(y):
    # trigamma(y) - [1/y + 1/(2y^2)]
    inv = 1.0 / y
    inv2 = inv * inv
    return (
        inv
        * inv2
        * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (1.0 / 42 - inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * 691.0 / 2730)))))
    )


@njit(cache=True)
def _digamma(x):
    acc = 0.0
    while x < _SHIFT:
        acc -= 1.0 / x
        x += 1.0
    return acc + math.log(x) - 0.5 / x + _psi_tail(x)


@njit(cache=True)
def _trigamma(x):
    acc = 0.0
    while x < _SHIFT:
        acc += 1.0 / (x * x)
        x += 1.0
    return acc + 1.0 / x + 0.5 / (x * x) + _trigamma_tail(x)


@njit(cache=True)
def _trigamma_diff(x, m):
    """trigamma(x + m) - trigamma(x) for x > 0, m >= 0."""
    if m == 0.0:
        return 0.0
    if x < _SHIFT:
        return _trigamma(x + m) - _trigamma(x)
    y = x + m
    return -m / (x * y) - 0.5 * m * (x + y) / (x * x * y * y) + (_trigamma_tail(y) - _trigamma_tail(x))


def log_gamma(x):
    """Natural log of the gamma function for x > 0."""
    arr = _check_positive("log_gamma", x)
    if arr.ndim == 0:
        return math.lgamma(float(arr))
    return np.vectorize(math.lgamma, otypes=[float])(arr)


def log_beta(x, y):
    """log B(x, y) = log_gamma(x) + log_gamma(y) - log_gamma(x + y)."""
    _check_positive("log_beta", x)
    _check_positive("log_beta", y)
    return log_gamma(x) + log_gamma(y) - log_gamma(np.add(x, y))


def digamma(x):
    """Derivative of ``log_gamma``."""
    arr = _check_positive("digamma", x)
    if arr.ndim == 0:
        return _digamma(float(arr))
    return np.array([_digamma(v) for v in arr.ravel()]).reshape(arr.shape)


def trigamma(x):
    """Second derivative of ``log_gamma``."""
    arr = _check_positive("trigamma", x)
    if arr.ndim == 0:
        return _trigamma(float(arr))
    return np.array([_trigamma(v) for v in arr.ravel()]).reshape(arr.shape)


def log_rising(x, m):
    """log of the rising factorial x (x+1) ... (x+m-1), i.e. lgamma(x+m) - lgamma(x).

    Accurate even when x is huge compared with m, where subtracting two
    ``log_gamma`` values would lose most significant digits.
    """
    _check_positive("log_rising", x)
    if m < 0:
        raise ValueError("log_rising requires m >= 0")
    return _log_rising(float(x), float(m))


def log_choose(M, W):
    """log of the binomial coefficient C(M, W)."""
    M = int(M)
    W = int(W)
    if M < 0 or W < 0 or W > M:
        raise ValueError(f"log_choose requires 0 <= W <= M, got M={M}, W={W}")
    k = min(W, M - W)
    # lgamma(M+1) - lgamma(M-k+1) via the rising factorial avoids subtracting two huge values
    return _log_rising(M - k + 1.0, float(k)) - math.lgamma(k + 1.0)


def _gamma_q(a, x, eps=1e-15, max_iter=100_000):
    """Regularized upper incomplete gamma Q(a, x)."""
    if x == 0.0:
        return 1.0
    log_prefix = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        # series for P(a, x)
        ap = a
        term = 1.0 / a
        total = term
        for _ in range(max_iter):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * eps:
                break
        else:
            raise ArithmeticError("incomplete gamma series did not converge")
        return 1.0 - total * math.exp(log_prefix)
    # modified Lentz continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, max_iter):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    else:
        raise ArithmeticError("incomplete gamma continued fraction did not converge")
    return math.exp(log_prefix) * h


def chi2_sf(t, r):
    """Survival function P(X >= t) of a chi-squared variable with ``r`` degrees of freedom."""
    if not r >= 1 or int(r) != r:
        raise ValueError(f"degrees of freedom must be a positive integer, got {r!r}")
    if not t >= 0:
        raise ValueError(f"chi2_sf requires t >= 0, got {t!r}")
    if math.isinf(t):
        return 0.0
    return min(1.0, max(0.0, _gamma_q(0.5 * r, 0.5 * t)))
