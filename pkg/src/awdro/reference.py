"""Small instances with closed-form answers, used by ``awdro verify`` and the tests.

Each check is a row ``{name, expected, actual, tol, passed}``; inequality
rows carry ``relation`` ``">="`` and pass when ``actual >= expected - tol``.
"""

from __future__ import annotations

import math

from .adapted_metrics import adapted_wasserstein, adapted_wasserstein_inf, wasserstein
from .costs import from_expression, quadratic_tracking
from .measures import AdaptedMeasure


def two_point_pair(eps: float, p: float):
    """Two processes with equal second-period laws but different first-period information."""
    mu = AdaptedMeasure.from_paths([(0.0, 1.0), (0.0, -1.0)], [0.5, 0.5], p)
    nu = AdaptedMeasure.from_paths([(eps, 1.0), (-eps, -1.0)], [0.5, 0.5], p)
    return mu, nu


def blowup_pair(eps: float, p: float = 1.0):
    """A Dirac against a tree whose rare branch jumps by ``1/sqrt(eps)``."""
    mu = AdaptedMeasure.dirac((0.0, 0.0), p)
    nu = AdaptedMeasure.from_paths(
        [(eps * (eps - 1.0), -1.0 / math.sqrt(eps)), (eps * eps, math.sqrt(eps) / (1.0 - eps))],
        [eps, 1.0 - eps], p)
    return mu, nu


def swap_triple(p: float):
    """``mu``, ``nu`` and their mixture; the mixture loses the first-period information."""
    mu = AdaptedMeasure.from_paths([(1.0, 1.0), (0.0, 100.0)], [0.5, 0.5], p)
    nu = AdaptedMeasure.from_paths([(1.0, 100.0), (0.0, 1.0)], [0.5, 0.5], p)
    mix = AdaptedMeasure.from_paths([(1.0, 1.0), (0.0, 100.0), (1.0, 100.0), (0.0, 1.0)], [0.25] * 4, p)
    return mu, nu, mix


def escaping_sequence(n: int, p: float = 2.0):
    mu_n = AdaptedMeasure.from_paths([(0.0, 0.0), (1.0, 1.0)], [1.0 - 1.0 / n, 1.0 / n], p)
    return mu_n, AdaptedMeasure.dirac((0.0, 0.0), p)


def _row(name, expected, actual, tol, relation="=="):
    if relation == "==":
        ok = abs(actual - expected) <= tol
    else:
        ok = actual >= expected - tol
    return {"name": name, "expected": float(expected), "actual": float(actual), "tol": tol,
            "relation": relation, "passed": bool(ok)}


def distance_checks(threads: int | None = None) -> list[dict]:
    rows = []
    for p in (1.0, 2.0):
        for eps in (0.5, 0.1, 0.01):
            mu, nu = two_point_pair(eps, p)
            rows.append(_row(f"two_point AW_p p={p:g} eps={eps:g}", (eps ** p + 2 ** (p - 1)) ** (1 / p),
                             adapted_wasserstein(mu, nu, threads).value, 1e-9))
            rows.append(_row(f"two_point W_p p={p:g} eps={eps:g}", eps, wasserstein(mu, nu, threads).value, 1e-9))
    for eps in (0.04, 0.01):
        mu, nu = blowup_pair(eps)
        rows.append(_row(f"blowup AW_1 eps={eps:g}", 2 * eps ** 2 * (1 - eps) + 2 * math.sqrt(eps),
                         adapted_wasserstein(mu, nu, threads).value, 1e-9))
        rows.append(_row(f"blowup AW_1_inf eps={eps:g}", 1 / math.sqrt(eps),
                         adapted_wasserstein_inf(mu, nu, threads).value, 1e-9))
    for p in (1.0, 2.0):
        mu, nu, mix = swap_triple(p)
        rows.append(_row(f"swap AW_p_inf(mu,nu) p={p:g}", 1.0, adapted_wasserstein_inf(mu, nu, threads).value, 1e-9))
        rows.append(_row(f"swap AW_p_inf(mu,mix) p={p:g}", 99 * 0.5 ** (1 / p),
                         adapted_wasserstein_inf(mu, mix, threads).value, 1e-9, ">="))
    for n in (2, 10, 100):
        mu_n, d = escaping_sequence(n)
        rows.append(_row(f"escaping AW_2_inf n={n}", 1.0, adapted_wasserstein_inf(mu_n, d, threads).value, 1e-12))
    return rows


def dro_checks(threads: int | None = None) -> list[dict]:
    from .dro import ControlGrid, minimax_gap, solve_controlled, solve_uncontrolled
    from .sensitivity import upsilon, upsilon_martingale

    rows = []
    mu = AdaptedMeasure.dirac((0.0,), 2.0)
    sol = solve_controlled(mu, quadratic_tracking(1), ControlGrid(-1.0, 1.0), 1.0, threads=threads)
    rows.append(_row("tracking N=1 delta=1 value", 1.0, sol.value, 1e-9))
    rows.append(_row("tracking N=1 delta=1 gap", 0.0, minimax_gap(sol), 1e-9))
    lin = from_expression("y1", 1)
    rows.append(_row("linear N=1 delta=1 value", 1.0, solve_uncontrolled(mu, lin, 1.0, threads=threads).value, 1e-9))
    two = AdaptedMeasure.from_paths([(-1.0,), (1.0,)], [0.5, 0.5], 2.0)
    rows.append(_row("sensitivity two-point", 1.0, upsilon(two, lin).value, 1e-10))
    rows.append(_row("martingale sensitivity two-point", 0.0, upsilon_martingale(two, lin).value, 1e-10))
    return rows


def small_grids(mu: AdaptedMeasure, delta: float, seed: int, size: int = 5) -> dict:
    """Per-node perturbation grids of ``size`` points: the atoms plus seeded uniform points."""
    import numpy as np

    from .measures import kernel_at

    rng = np.random.default_rng(seed)
    out = {}
    for u in mu.internal_nodes():
        k = kernel_at(mu, u)
        lo, hi = k.support.min() - 1.5 * delta, k.support.max() + 1.5 * delta
        extra = rng.uniform(lo, hi, size - len(k))
        out[u] = np.unique(np.concatenate([k.support, extra]))
    return out


def oracle_checks(seed: int = 0, count: int = 4, threads: int | None = None) -> list[dict]:
    """Dynamic programming against exhaustive enumeration on seeded N=2 instances."""
    from .dro import ControlGrid, solve_controlled, solve_uncontrolled
    from .measures import random_tree
    from .oracle import brute_dro

    rows = []
    payoff = from_expression("y1*y2 + abs(y2 - 0.5)", 2)
    tracking = quadratic_tracking(2)
    K = ControlGrid(-1.0, 1.0, 5, polish=False)
    for k in range(count):
        s = seed * 1000 + k
        mu = random_tree(s, 2, (1, 3))
        delta = 0.3
        g = small_grids(mu, delta, s)
        rows.append(_row(f"oracle uncontrolled seed={s}", brute_dro(mu, payoff, None, delta, g),
                         solve_uncontrolled(mu, payoff, delta, grid=g, threads=threads).value, 1e-9))
        rows.append(_row(f"oracle controlled seed={s}", brute_dro(mu, tracking, K, delta, g),
                         solve_controlled(mu, tracking, K, delta, grid=g, threads=threads).value, 1e-9))
    return rows


def all_checks(threads: int | None = None, seed: int = 0) -> list[dict]:
    return distance_checks(threads) + dro_checks(threads) + oracle_checks(seed, threads=threads)
