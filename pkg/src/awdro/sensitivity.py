"""First-order sensitivity of the robust value ``V(delta)`` at ``delta = 0``.

With ``g_t(x_{1:t}) = E[d_t f(X, a*) | X_{1:t} = x_{1:t}]`` the sensitivity is

    U = sum_t  E[ || g_t ||_{L^q(kernel at x_{1:t-1})} ]

and the martingale version replaces each inner norm by
``inf_lam || g_t + lam ||``.  ``a*`` is the optimal control of the
unperturbed problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._numerics import golden_section
from .costs import CostModel
from .dro import ControlGrid, solve_controlled, solve_martingale, solve_uncontrolled
from .measures import AdaptedMeasure, is_martingale, kernel_at

DEFAULT_SCHEDULE = (0.2, 0.1, 0.05, 0.025, 0.0125)


class SensitivityError(ValueError):
    pass


@dataclass(eq=False)
class SensitivityReport:
    value: float
    kind: str  # "plain" or "martingale"
    p: float
    contributions: list[float]
    controls: dict = field(default_factory=dict)  # node id (None = root) -> control for the next period
    lambdas: dict = field(default_factory=dict)  # martingale only: context node -> lam*
    directions: dict = field(default_factory=dict)  # t -> {node id: T_t}
    slopes: list = field(default_factory=list)  # (delta, V(delta), slope)
    floor_slopes: list = field(default_factory=list)  # (delta, lower-bound slope)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        key = lambda u: "root" if u is None else str(u)
        return {
            "kind": self.kind,
            "value": self.value,
            "p": self.p,
            "contributions": list(self.contributions),
            "controls": {key(u): a for u, a in self.controls.items()},
            "lambdas": {key(u): v for u, v in self.lambdas.items()},
            "directions": {str(t): {key(u): v for u, v in d.items()} for t, d in self.directions.items()},
            "slopes": [{"delta": d, "value": v, "slope": s} for d, v, s in self.slopes],
            "floor_slopes": [{"delta": d, "slope": s} for d, s in self.floor_slopes],
            "warnings": list(self.warnings),
        }


def _lq_norm(values: np.ndarray, weights: np.ndarray, q: float) -> float:
    if math.isinf(q):
        return float(np.max(np.abs(values[weights > 0])))
    return float(np.sum(weights * np.abs(values) ** q) ** (1.0 / q))


def _conjugate(p: float) -> float:
    return math.inf if p == 1 else p / (p - 1.0)


def _optimal_controls(mu: AdaptedMeasure, cost: CostModel, K: ControlGrid | None, martingale: bool,
                      warnings: list) -> dict:
    """Controls of the ``delta = 0`` problem, keyed by reference node."""
    if not cost.controlled:
        return {}
    if not cost.strongly_convex:
        raise SensitivityError("sensitivity needs a cost asserted strongly convex in the control")
    K = ControlGrid() if K is None else K
    solver = solve_martingale if martingale else solve_controlled
    sol = solver(mu, cost, K, 0.0)
    controls = {nd.x_node: nd.control for nd in sol.joint if nd.depth < mu.horizon}
    # flag flat directions: a tie means the unperturbed optimizer is not unique
    h = (K.hi - K.lo) / max(K.n - 1, 1)
    for u, a in controls.items():
        kern = kernel_at(mu, u)
        base = () if u is None else mu.path_values(u)
        y = np.array([base + (x,) for x in kern.support])
        t = len(base) + 1

        def phi(b):
            return float(kern.probs @ cost.part(t, y, b))

        fa = phi(a)
        for b in (a - h, a + h):
            if K.lo <= b <= K.hi and phi(b) <= fa + 1e-12 * (1 + abs(fa)):
                warnings.append(f"optimal control at node {u!r} is not unique; using the smallest")
                break
    return controls


def conditional_gradients(mu: AdaptedMeasure, cost: CostModel, controls: dict) -> list[dict]:
    """``g[t][node]`` for nodes at depth ``t`` (1-based periods, ``g[0]`` unused)."""
    if cost.grad is None:
        raise SensitivityError(f"cost {cost.name!r} has no derivatives")
    N = mu.horizon
    leaves = list(mu.leaves)
    Y = np.array([mu.path_values(l) for l in leaves])
    A = None
    if cost.controlled:
        A = np.array([[controls[a] for a in ((None,) + mu.ancestors(l)[:-1])] for l in leaves])
    D = cost.gradient(Y, A)
    g: list[dict] = [dict() for _ in range(N + 1)]
    # mass of each leaf below each node: average from the leaves upwards
    mass = {l: mu.path_prob(l) for l in leaves}
    acc = {l: D[k] * mass[l] for k, l in enumerate(leaves)}
    for t in range(N, 0, -1):
        for v in mu.layers[t - 1]:
            if t < N:
                kids = mu.children(v)
                mass[v] = sum(mass[c] for c in kids)
                acc[v] = sum(acc[c] for c in kids)
            g[t][v] = float(acc[v][t - 1] / mass[v])
    return g


def _contexts(mu: AdaptedMeasure, t: int):
    return [None] if t == 1 else list(mu.layers[t - 2])


def _context_prob(mu: AdaptedMeasure, u) -> float:
    return 1.0 if u is None else mu.path_prob(u)


def upsilon(mu: AdaptedMeasure, cost: CostModel, K: ControlGrid | None = None) -> SensitivityReport:
    """Sensitivity of the plain robust problem."""
    warnings: list[str] = []
    controls = _optimal_controls(mu, cost, K, False, warnings)
    g = conditional_gradients(mu, cost, controls)
    q = _conjugate(mu.p)
    contrib = []
    for t in range(1, mu.horizon + 1):
        total = 0.0
        for u in _contexts(mu, t):
            kern = kernel_at(mu, u)
            vals = np.array([g[t][c] for c in kern.child_ids])
            total += _context_prob(mu, u) * _lq_norm(vals, kern.probs, q)
        contrib.append(total)
    return SensitivityReport(float(sum(contrib)), "plain", mu.p, contrib, controls, warnings=warnings)


def min_shifted_norm(values: np.ndarray, weights: np.ndarray, q: float, tol: float = 1e-10) -> tuple[float, float]:
    """``inf_lam ||values + lam||_{L^q}`` over ``lam`` in ``[-2||values||, 2||values||]``; returns ``(value, lam)``."""
    r = 2.0 * _lq_norm(values, weights, q)
    if r == 0.0:
        return 0.0, 0.0
    lam, val = golden_section(lambda l: _lq_norm(values + l, weights, q), -r, r, tol=tol)
    return val, lam


def upsilon_martingale(mu: AdaptedMeasure, cost: CostModel, K: ControlGrid | None = None) -> SensitivityReport:
    """Sensitivity of the martingale-constrained robust problem."""
    if not is_martingale(mu):
        raise SensitivityError("reference tree is not a martingale")
    warnings: list[str] = []
    controls = _optimal_controls(mu, cost, K, True, warnings)
    g = conditional_gradients(mu, cost, controls)
    q = _conjugate(mu.p)
    contrib, lambdas = [], {}
    for t in range(1, mu.horizon + 1):
        total = 0.0
        for u in _contexts(mu, t):
            kern = kernel_at(mu, u)
            vals = np.array([g[t][c] for c in kern.child_ids])
            val, lam = min_shifted_norm(vals, kern.probs, q)
            lambdas[u] = lam
            total += _context_prob(mu, u) * val
        contrib.append(total)
    return SensitivityReport(float(sum(contrib)), "martingale", mu.p, contrib, controls, lambdas, warnings=warnings)


def variance_formula(mu: AdaptedMeasure, cost: CostModel, controls: dict | None = None) -> float:
    """Closed form of the martingale sensitivity for ``p = 2``: kernel standard deviations of ``g_t``."""
    g = conditional_gradients(mu, cost, controls or {})
    total = 0.0
    for t in range(1, mu.horizon + 1):
        for u in _contexts(mu, t):
            kern = kernel_at(mu, u)
            vals = np.array([g[t][c] for c in kern.child_ids])
            mean = kern.probs @ vals
            total += _context_prob(mu, u) * math.sqrt(max(float(kern.probs @ (vals - mean) ** 2), 0.0))
    return total


def upsilon_tilde(mu: AdaptedMeasure, cost: CostModel, controls: dict | None = None) -> float:
    """Comparison scalar ``(sum_t ||g_t||_{L^q(mu)}^q)^{1/q}`` of the adapted Wasserstein ball."""
    g = conditional_gradients(mu, cost, controls or {})
    q = _conjugate(mu.p)
    norms = []
    for t in range(1, mu.horizon + 1):
        nodes = list(mu.layers[t - 1])
        vals = np.array([g[t][v] for v in nodes])
        w = np.array([mu.path_prob(v) for v in nodes])
        norms.append(_lq_norm(vals, w, q))
    norms = np.array(norms)
    return float(norms.max()) if math.isinf(q) else float(np.sum(norms ** q) ** (1.0 / q))


def worst_direction(mu: AdaptedMeasure, cost: CostModel, controls: dict | None, t: int,
                    martingale: bool = False) -> dict:
    """Per-node direction ``T_t`` of unit ``L^p`` norm under each kernel that attains
    ``int g_t T_t = ||g_t||_{L^q}``.  Nodes where ``g_t`` vanishes get ``T_t = 0``."""
    p = mu.p
    if p == 1:
        raise SensitivityError("the duality map is not single-valued for p = 1")
    if not 1 <= t <= mu.horizon:
        raise SensitivityError(f"period {t} outside 1..{mu.horizon}")
    q = _conjugate(p)
    g = conditional_gradients(mu, cost, controls or {})
    out = {}
    for u in _contexts(mu, t):
        kern = kernel_at(mu, u)
        vals = np.array([g[t][c] for c in kern.child_ids])
        if martingale:
            _, lam = min_shifted_norm(vals, kern.probs, q)
            vals = vals + lam
        norm = _lq_norm(vals, kern.probs, q)
        if norm <= 1e-300:
            T = np.zeros_like(vals)
        else:
            T = np.sign(vals) * np.abs(vals) ** (q - 1) / norm ** (q - 1)
            if martingale:
                T = T - kern.probs @ T
        out.update({c: float(x) for c, x in zip(kern.child_ids, T)})
    return out


def perturbed_tree(mu: AdaptedMeasure, directions: dict, shift: float) -> AdaptedMeasure:
    """Move every node value ``x`` to ``x + shift * T(node)``."""
    leaves = list(mu.leaves)
    paths, probs = [], []
    for l in leaves:
        paths.append([mu.node(v).value + shift * directions.get(v, 0.0) for v in mu.ancestors(l)])
        probs.append(mu.path_prob(l))
    return AdaptedMeasure.from_paths(paths, probs, mu.p)


def _solve(mu, cost, K, delta, martingale, m):
    if not cost.controlled:
        if martingale:
            return solve_martingale(mu, cost, None, delta, m=m)
        return solve_uncontrolled(mu, cost, delta, m=m)
    K = ControlGrid() if K is None else K
    if martingale:
        return solve_martingale(mu, cost, K, delta, m=m)
    return solve_controlled(mu, cost, K, delta, m=m)


def empirical_slope(mu: AdaptedMeasure, cost: CostModel, K: ControlGrid | None = None,
                    schedule=DEFAULT_SCHEDULE, martingale: bool = False, m: int = 64,
                    report: SensitivityReport | None = None) -> SensitivityReport:
    """Finite-difference slopes ``(V(delta) - V(0)) / delta`` along a decreasing schedule.

    When ``p > 1`` each step also solves the unperturbed problem on the tree
    moved along the worst directions by ``delta / (1 + delta)``, which is a
    member of the ball and so gives an independent lower bound on the slope.
    """
    schedule = [float(d) for d in schedule]
    if any(d <= 0 for d in schedule) or any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise SensitivityError("delta schedule must be positive and strictly decreasing")
    if report is None:
        report = upsilon_martingale(mu, cost, K) if martingale else upsilon(mu, cost, K)
    v0 = _solve(mu, cost, K, 0.0, martingale, m).value
    dirs = {}
    if mu.p > 1:
        for t in range(1, mu.horizon + 1):
            d = worst_direction(mu, cost, report.controls, t, martingale)
            report.directions[t] = d
            dirs.update(d)
    for delta in schedule:
        v = _solve(mu, cost, K, delta, martingale, m).value
        report.slopes.append((delta, v, (v - v0) / delta))
        if dirs:
            nu = perturbed_tree(mu, dirs, delta / (1.0 + delta))
            floor = _solve(nu, cost, K, 0.0, False, m).value
            report.floor_slopes.append((delta, (floor - v0) / delta))
    return report
