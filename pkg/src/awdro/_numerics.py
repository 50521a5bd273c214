"""Small scalar minimizers shared by the control search and the sensitivity code."""

from __future__ import annotations

import math
from typing import Callable

INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(fn: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10,
                   max_iter: int = 500) -> tuple[float, float]:
    """Minimize a unimodal ``fn`` on ``[lo, hi]``; returns the best point evaluated."""
    a, b = float(lo), float(hi)
    if b - a <= tol:
        x = 0.5 * (a + b)
        return x, fn(x)
    c = b - INVPHI * (b - a)
    d = a + INVPHI * (b - a)
    fc, fd = fn(c), fn(d)
    best = min((fc, c), (fd, d))
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INVPHI * (b - a)
            fc = fn(c)
            best = min(best, (fc, c))
        else:
            a, c, fc = c, d, fd
            d = a + INVPHI * (b - a)
            fd = fn(d)
            best = min(best, (fd, d))
    return best[1], best[0]


def discrete_convex_argmin(fn: Callable[[int], float], n: int, tol: float = 0.0) -> int:
    """Smallest minimizer of a convex sequence ``fn(0..n-1)`` by ternary search.

    Values within ``tol`` of the minimum count as ties.
    """
    memo: dict[int, float] = {}

    def f(k):
        if k not in memo:
            memo[k] = fn(k)
        return memo[k]

    lo, hi = 0, n - 1
    while hi - lo > 2:
        m1 = lo + (hi - lo) // 3
        m2 = hi - (hi - lo) // 3
        if f(m1) <= f(m2):
            hi = m2
        else:
            lo = m1
    k = min(range(lo, hi + 1), key=lambda j: (f(j), j))
    fmin = f(k)
    while k > 0 and f(k - 1) <= fmin + tol:
        k -= 1
    return k
