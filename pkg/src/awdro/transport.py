"""One-step transport solvers.

* ``solve_transport``: exact transportation LP between two kernels.
* ``monotone_coupling``: quantile (comonotone) coupling on the real line.
* ``bottleneck_transport``: min over couplings of ``max(C_p, max score on support)``.
* ``dro_one_step_*``: the one-step Wasserstein DRO problem over a finite
  target grid, as a primal LP, through its Lagrangian dual in ``lambda``,
  and with a martingale (mean preserving) constraint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .lp import Infeasible, solve_lp
from .measures import Kernel

SUPPORT_TOL = 1e-13


@dataclass(eq=False)
class TransportPlan:
    """Coupling of ``source`` with ``target`` (a kernel or a free grid).

    ``matrix[i, j]`` is the joint mass moved from source atom ``i`` to target
    point ``j``.
    """

    source: Kernel
    target: Kernel | None
    target_grid: np.ndarray
    matrix: np.ndarray
    p: float = 1.0
    objective: float = 0.0
    bottleneck: float = 0.0

    def cost_p(self, p: float | None = None) -> float:
        """``C_p(plan)^p``, recomputed from the fields."""
        p = self.p if p is None else p
        d = np.abs(self.source.support[:, None] - self.target_grid[None, :]) ** p
        return float(np.sum(self.matrix * d))

    def c_p(self, p: float | None = None) -> float:
        p = self.p if p is None else p
        return self.cost_p(p) ** (1.0 / p)

    def support_mask(self) -> np.ndarray:
        return self.matrix > SUPPORT_TOL

    def realized_bottleneck(self, scores) -> float:
        mask = self.support_mask()
        return float(np.max(np.asarray(scores, dtype=float)[mask])) if mask.any() else 0.0

    def nonzeros(self) -> int:
        return int(self.support_mask().sum())


@dataclass(eq=False)
class DroOneStepResult:
    value: float
    plan: TransportPlan
    lam: float
    lam_m: float | None = None
    gap: float = 0.0
    basis: np.ndarray | None = None


# -- transportation problem ------------------------------------------------------

def _check_cost(source: Kernel, target: Kernel, cost) -> np.ndarray:
    c = np.asarray(cost, dtype=float)
    if c.shape != (len(source), len(target)):
        raise ValueError(f"cost shape {c.shape} does not match kernels ({len(source)}, {len(target)})")
    if np.any(np.isnan(c)) or np.any(c == -np.inf):
        raise ValueError("cost entries must be finite or +inf (forbidden)")
    return c


def solve_transport(source: Kernel, target: Kernel, cost) -> TransportPlan:
    """Exact minimum-cost coupling; ``+inf`` entries are forbidden edges.

    Returns a vertex of the transportation polytope.  Raises
    :class:`~awdro.lp.Infeasible` when forbidden edges leave no coupling.
    """
    c = _check_cost(source, target, cost)
    m, n = c.shape
    allowed = np.flatnonzero(np.isfinite(c).ravel())
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A[m + j, j::n] = 1.0
    b = np.concatenate([source.probs, target.probs])
    res = solve_lp(c.ravel()[allowed], A[:, allowed], b)
    x = np.zeros(m * n)
    x[allowed] = res.x
    q = x.reshape(m, n)
    return TransportPlan(source, target, target.support, q, objective=float(np.sum(q[q > 0] * c[q > 0])))


def monotone_coupling(source: Kernel, target: Kernel, p: float = 1.0) -> TransportPlan:
    """Quantile coupling of two sorted kernels (north-west corner rule)."""
    a = source.probs.copy()
    b = target.probs.copy()
    q = np.zeros((len(a), len(b)))
    i = j = 0
    while i < len(a) and j < len(b):
        mass = min(a[i], b[j])
        q[i, j] += mass
        a[i] -= mass
        b[j] -= mass
        # advance whichever side is exhausted; on a tie advance both
        if a[i] <= 1e-15 and i < len(a):
            i += 1
        if b[j] <= 1e-15 and j < len(b):
            j += 1
    plan = TransportPlan(source, target, target.support, q, p=p)
    plan.objective = plan.cost_p(p)
    return plan


def bottleneck_transport(source: Kernel, target: Kernel, p: float, scores) -> tuple[float, TransportPlan]:
    """Minimize ``max(C_p(gamma), max_{gamma_ij > 0} scores_ij)`` over couplings.

    Scans the distinct score values as thresholds.  At threshold ``tau`` the
    edges with larger score are forbidden and the cheapest remaining coupling
    is computed; its objective uses the realized bottleneck of that plan.
    The scan stops once ``tau`` reaches the best objective seen, since every
    later plan would already have been available at a smaller threshold.
    """
    a = np.asarray(scores, dtype=float)
    if a.shape != (len(source), len(target)):
        raise ValueError("score matrix shape does not match kernels")
    if np.any(~np.isfinite(a)) or np.any(a < 0):
        raise ValueError("bottleneck scores must be finite and nonnegative")
    base = np.abs(source.support[:, None] - target.support[None, :]) ** p
    best_val, best_plan = np.inf, None
    for tau in np.unique(a):
        if tau >= best_val:
            break
        cost = np.where(a <= tau, base, np.inf)
        try:
            plan = solve_transport(source, target, cost)
        except Infeasible:
            continue
        plan.p = p
        plan.bottleneck = plan.realized_bottleneck(a)
        value = max(plan.bottleneck, plan.c_p(p))
        plan.objective = value
        if value < best_val:
            best_val, best_plan = value, plan
    if best_plan is None:
        raise RuntimeError("no feasible coupling at the largest threshold")
    return float(best_val), best_plan


# -- one-step DRO -----------------------------------------------------------------

def default_grid(source: Kernel, delta: float, p: float, m: int = 64) -> np.ndarray:
    """Source atoms plus ``m`` equispaced points on each side of every atom.

    Atom ``i`` reaches ``delta / mu_i^{1/p}``, the largest displacement the
    budget allows when only that atom moves.
    """
    pts = [source.support]
    if delta > 0 and m > 0:
        k = np.arange(1, m + 1)
        for x, w in zip(source.support, source.probs):
            h = delta / w ** (1.0 / p) / m
            pts.append(x - k * h)
            pts.append(x + k * h)
    return np.unique(np.concatenate(pts))


def _payoff_matrix(source: Kernel, grid: np.ndarray, g) -> np.ndarray:
    if callable(g):
        G = np.asarray(g(source.support[:, None], grid[None, :]), dtype=float)
        G = np.broadcast_to(G, (len(source), grid.size)).copy()
    else:
        G = np.asarray(g, dtype=float)
    if G.shape != (len(source), grid.size):
        raise ValueError(f"payoff shape {G.shape} does not match ({len(source)}, {grid.size})")
    if not np.all(np.isfinite(G)):
        raise ValueError("payoff must be finite on the grid")
    return G


class OneStepLP:
    """Constraint data of a one-step DRO LP, reusable across payoffs.

    Variables are the joint masses ``pi_ij`` (source atom ``i`` to grid
    point ``j``) plus the budget slack.  Columns are ordered per atom by
    distance to the atom, so ties in pricing prefer small moves.
    """

    def __init__(self, source: Kernel, grid, delta: float, p: float, martingale: bool = False):
        grid = np.asarray(grid, dtype=float)
        if delta < 0:
            raise ValueError("delta must be nonnegative")
        pos = np.searchsorted(grid, source.support)
        ok = (pos < grid.size) & (grid[np.minimum(pos, grid.size - 1)] == source.support)
        if not np.all(ok) or np.any(np.diff(grid) <= 0):
            raise ValueError("target grid must be sorted, distinct and contain every source atom")
        self.source, self.grid, self.delta, self.p = source, grid, float(delta), float(p)
        self.martingale = martingale
        m, n = len(source), grid.size
        x, w = source.support, source.probs
        dist = np.abs(x[:, None] - grid[None, :])
        self.C = dist ** p
        order = np.argsort(dist, axis=1, kind="stable")
        # column k <-> (atom cols_i[k], grid point cols_j[k])
        self.cols_i = np.repeat(np.arange(m), n)
        self.cols_j = order.ravel()
        ncol = m * n + 1
        rows = m + 1 + (1 if martingale else 0)
        A = np.zeros((rows, ncol))
        A[self.cols_i, np.arange(m * n)] = 1.0
        A[m, : m * n] = self.C[self.cols_i, self.cols_j]
        A[m, -1] = 1.0
        if martingale:
            A[m + 1, : m * n] = x[self.cols_i] - grid[self.cols_j]
        self.A = A
        self.b = np.concatenate([w, [self.delta ** p], [0.0] if martingale else []])
        basis = [i * n for i in range(m)] + [m * n]  # identity plan plus slack
        if martingale:
            extra = np.flatnonzero(np.abs(A[m + 1, : m * n]) > 0)
            if extra.size:
                basis.append(int(extra[0]))
            else:
                # the grid is exactly the atoms of a one-point kernel: drop the vacuous row
                self.A = A[: m + 1]
                self.b = self.b[: m + 1]
                self.martingale = False
        self.initial_basis = np.array(basis)

    def solve(self, G: np.ndarray, basis=None) -> DroOneStepResult:
        m, n = len(self.source), self.grid.size
        c = np.concatenate([-G[self.cols_i, self.cols_j], [0.0]])
        res = solve_lp(c, self.A, self.b, basis=self.initial_basis if basis is None else basis)
        q = np.zeros((m, n))
        q[self.cols_i, self.cols_j] = res.x[: m * n]
        lam = max(0.0, -float(res.duals[m]))
        lam_m = float(res.duals[m + 1]) if self.martingale else None
        value = -res.value
        plan = TransportPlan(self.source, None, self.grid, q, p=self.p, objective=value)
        dual_val = self.dual_value(G, lam, lam_m or 0.0)
        return DroOneStepResult(value, plan, lam, lam_m, abs(dual_val - value), res.basis)

    def value(self, G: np.ndarray, basis=None) -> tuple[float, np.ndarray]:
        """Optimal value and basis only; the cheap path used inside control searches."""
        c = np.concatenate([-G[self.cols_i, self.cols_j], [0.0]])
        res = solve_lp(c, self.A, self.b, basis=self.initial_basis if basis is None else basis)
        return -res.value, res.basis

    def dual_value(self, G: np.ndarray, lam: float, lam_m: float = 0.0) -> float:
        """Lagrangian dual function; an upper bound on the primal value for any ``lam >= 0``."""
        x, w = self.source.support, self.source.probs
        inner = G - lam * self.C
        if lam_m:
            inner = inner + lam_m * (x[:, None] - self.grid[None, :])
        return float(lam * self.delta ** self.p + w @ inner.max(axis=1))


def dro_one_step_primal(source: Kernel, g, delta: float, p: float, grid=None, m: int = 64) -> DroOneStepResult:
    """Maximize ``sum_ij pi_ij g(x_i, y_j)`` over couplings with first marginal
    ``source`` and ``sum_ij pi_ij |x_i - y_j|^p <= delta^p``.

    ``g`` is a callable ``g(x, y)`` (broadcasting) or a payoff matrix on the
    grid.  The default grid is :func:`default_grid` with ``m`` points per side.
    """
    grid = default_grid(source, delta, p, m) if grid is None else np.asarray(grid, dtype=float)
    prob = OneStepLP(source, grid, delta, p)
    return prob.solve(_payoff_matrix(source, grid, g))


def dro_one_step_martingale(source: Kernel, g, delta: float, p: float, grid=None, m: int = 64) -> DroOneStepResult:
    """As :func:`dro_one_step_primal` with the extra row ``sum_ij pi_ij (x_i - y_j) = 0``."""
    grid = default_grid(source, delta, p, m) if grid is None else np.asarray(grid, dtype=float)
    prob = OneStepLP(source, grid, delta, p, martingale=True)
    res = prob.solve(_payoff_matrix(source, grid, g))
    if res.lam_m is None:
        res.lam_m = 0.0
    return res


def _dual_slopes(G, C, w, budget, lam, tol):
    inner = G - lam * C
    best = inner.max(axis=1, keepdims=True)
    scale = 1.0 + np.abs(G).max()
    arg = inner >= best - tol * scale
    c_lo = np.where(arg, C, np.inf).min(axis=1)
    c_hi = np.where(arg, C, -np.inf).max(axis=1)
    phi = lam * budget + float(w @ best[:, 0])
    return phi, budget - float(w @ c_lo), budget - float(w @ c_hi)


def minimize_dual(source: Kernel, G: np.ndarray, C: np.ndarray, delta: float, p: float,
                  max_iter: int = 200) -> tuple[float, float]:
    """Minimize ``phi(lam) = lam delta^p + sum_i mu_i max_j (G_ij - lam C_ij)`` over ``lam >= 0``.

    Returns ``(value, lam*)``.  Bisection on the sign of the one-sided
    derivatives, followed by intersecting the two bracketing linear pieces.
    """
    w = source.probs
    budget = float(delta) ** p
    tol = 1e-13
    nz = C[C > 0]
    if nz.size == 0:
        return float(w @ G.max(axis=1)), 0.0
    lam_max = (G.max() - G.min()) / nz.min() + 1.0
    phi0, right0, _ = _dual_slopes(G, C, w, budget, 0.0, tol)
    if right0 >= 0:
        return phi0, 0.0
    lo, hi = 0.0, lam_max
    phi_lo, s_lo = phi0, right0
    phi_hi, _, s_hi = _dual_slopes(G, C, w, budget, hi, tol)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        phi_mid, right, left = _dual_slopes(G, C, w, budget, mid, tol)
        if right < 0:
            lo, phi_lo, s_lo = mid, phi_mid, right
        elif left > 0:
            hi, phi_hi, s_hi = mid, phi_mid, left
        else:
            return phi_mid, mid
    cands = [(phi_lo, lo), (phi_hi, hi)]
    if s_lo < s_hi:
        # the minimizer is the breakpoint where the two bracketing pieces meet
        lam_b = (phi_hi - phi_lo + s_lo * lo - s_hi * hi) / (s_lo - s_hi)
        lam_b = min(max(lam_b, lo), hi)
        cands.append((_dual_slopes(G, C, w, budget, lam_b, tol)[0], lam_b))
    val, lam = min(cands)
    return val, lam


def dro_one_step_dual(source: Kernel, g, delta: float, p: float, grid=None, m: int = 64) -> DroOneStepResult:
    """Solve the one-step problem through its Lagrangian dual in ``lambda``.

    The returned value is the dual minimum; ``gap`` compares it with the
    primal LP value and ``plan`` is the primal optimizer.
    """
    grid = default_grid(source, delta, p, m) if grid is None else np.asarray(grid, dtype=float)
    G = _payoff_matrix(source, grid, g)
    C = np.abs(source.support[:, None] - grid[None, :]) ** p
    value, lam = minimize_dual(source, G, C, delta, p)
    primal = OneStepLP(source, grid, delta, p).solve(G)
    return DroOneStepResult(value, primal.plan, lam, None, abs(value - primal.value))


PayoffFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
