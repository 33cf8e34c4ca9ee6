"""Special functions on positive reals: log-gamma, digamma, trigamma, log-beta.

All functions accept scalars or numpy arrays and are vectorized.
"""

import math

import numpy as np

from .errors import DomainError

# Lanczos approximation, g = 7, nine coefficients.
_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Bernoulli numbers B_2 .. B_14 for the asymptotic series.
_BERNOULLI = (1.0 / 6, -1.0 / 30, 1.0 / 42, -1.0 / 30, 5.0 / 66, -691.0 / 2730, 7.0 / 6)
_ASYMPTOTIC_FROM = 6.0


def _as_positive(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        bad = arr[~(np.isfinite(arr) & (arr > 0))].ravel()
        raise DomainError(f"{name} requires finite positive arguments, got {bad[:5].tolist()}")
    return arr


def _unwrap(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def _lanczos(x):
    # valid for x >= 0.5
    z = x - 1.0
    acc = np.full_like(z, _LANCZOS_COEF[0])
    for i in range(1, len(_LANCZOS_COEF)):
        acc = acc + _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(acc)


def lgamma(x):
    """ln Gamma(x) for x > 0."""
    arr = _as_positive(x, "lgamma")
    small = arr < 0.5
    out = np.empty_like(arr)
    big = ~small
    out[big] = _lanczos(arr[big])
    if np.any(small):
        xs = arr[small]
        # reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        out[small] = np.log(np.pi / np.sin(np.pi * xs)) - _lanczos(1.0 - xs)
    return _unwrap(out, x)


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0.

    Shifts the argument up with psi(x) = psi(x + 1) - 1/x until x >= 6,
    then evaluates the asymptotic series.
    """
    arr = _as_positive(x, "digamma").copy()
    shift = np.zeros_like(arr)
    low = arr < _ASYMPTOTIC_FROM
    while np.any(low):
        shift[low] -= 1.0 / arr[low]
        arr[low] += 1.0
        low = arr < _ASYMPTOTIC_FROM
    inv2 = 1.0 / (arr * arr)
    series = np.zeros_like(arr)
    power = inv2.copy()
    for k, b in enumerate(_BERNOULLI, start=1):
        series += b / (2 * k) * power
        power = power * inv2
    out = np.log(arr) - 0.5 / arr - series + shift
    return _unwrap(out, x)


def trigamma(x):
    """psi'(x) for x > 0, same shift-then-series scheme as :func:`digamma`."""
    arr = _as_positive(x, "trigamma").copy()
    shift = np.zeros_like(arr)
    low = arr < _ASYMPTOTIC_FROM
    while np.any(low):
        shift[low] += 1.0 / (arr[low] * arr[low])
        arr[low] += 1.0
        low = arr < _ASYMPTOTIC_FROM
    inv = 1.0 / arr
    inv2 = inv * inv
    series = np.zeros_like(arr)
    power = inv2 * inv
    for b in _BERNOULLI:
        series += b * power
        power = power * inv2
    out = inv + 0.5 * inv2 + series + shift
    return _unwrap(out, x)


def log_beta(alpha, beta):
    """ln B(alpha, beta) = lnG(alpha) + lnG(beta) - lnG(alpha + beta)."""
    a = _as_positive(alpha, "log_beta")
    b = _as_positive(beta, "log_beta")
    out = lgamma(a) + lgamma(b) - lgamma(a + b)
    if np.ndim(alpha) == 0 and np.ndim(beta) == 0:
        return float(out)
    return out
