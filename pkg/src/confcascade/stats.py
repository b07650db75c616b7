"""Small numerical statistics kernel: chi-squared tail and exact binomial.

The chi-squared survival function is computed through the regularized
incomplete gamma function, implemented here directly (series expansion
below the a+1 crossover, Lentz continued fraction above it) so the
package carries no statistical-library dependency. Target relative
error is 1e-10 or better over the range these tests use.
"""

from __future__ import annotations

import math

_TINY = 1e-300
_EPS = 1e-16
_MAX_ITER = 10_000


class StatsError(ValueError):
    """Invalid input to a statistics routine."""


def _gamma_p_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by series, for x < a + 1."""
    term = 1.0 / a
    total = term
    denom = a
    for _ in range(_MAX_ITER):
        denom += 1.0
        term *= x / denom
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    else:
        raise StatsError(f"gamma series failed to converge (a={a}, x={x})")
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_continued_fraction(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by Lentz's method, for x >= a + 1."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b if b != 0.0 else 1.0 / _TINY
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    else:
        raise StatsError(f"gamma continued fraction failed to converge (a={a}, x={x})")
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a)."""
    if a <= 0:
        raise StatsError("shape a must be positive")
    if x < 0:
        raise StatsError("x must be non-negative")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_continued_fraction(a, x)


def chi2_sf(x: float, df: int = 1) -> float:
    """Chi-squared survival function P(X >= x) with df degrees of freedom."""
    if df <= 0:
        raise StatsError("degrees of freedom must be positive")
    if x < 0:
        raise StatsError("chi-squared statistic must be non-negative")
    return gamma_q(df / 2.0, x / 2.0)


def binom_two_sided_exact(b: int, c: int) -> float:
    """Two-sided exact binomial p-value for discordant counts under p=1/2.

    p = min(1, 2 * P(X <= min(b, c))) with X ~ Binomial(b + c, 1/2). The
    tail is an exact integer ratio, converted to float at the end; (0, 0)
    yields 1.0.
    """
    if b < 0 or c < 0:
        raise StatsError("counts must be non-negative")
    n = b + c
    if n == 0:
        return 1.0
    m = min(b, c)
    tail_numerator = sum(math.comb(n, i) for i in range(m + 1))
    p = 2.0 * (tail_numerator / (1 << n))
    return min(1.0, p)
