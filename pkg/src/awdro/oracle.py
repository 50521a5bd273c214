"""Brute-force verifiers for desk-scale instances.

Nothing here calls the simplex code.  Transport and one-step DRO polytopes
are enumerated vertex by vertex (every column subset of full rank is solved
directly), Monge maps are enumerated as index tuples, and the nested
objectives are evaluated from their definitions.  Budgets are checked before
any enumeration starts; an instance outside the budget raises
:class:`BudgetExceeded` instead of returning a truncated answer.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .costs import CostModel
from .measures import (AdaptedMeasure, Kernel, kernel_at, random_tree, tree_to_dict)

PlanClass = Literal["vertex", "map", "bicausal"]
FEAS_TOL = 1e-11


class BudgetExceeded(RuntimeError):
    """The instance is larger than the oracle is allowed to enumerate."""


@dataclass(frozen=True)
class OracleBudget:
    max_atoms: int = 3
    max_grid: int = 5
    max_horizon: int = 2
    max_controls: int = 5
    max_transport_atoms: int = 4
    max_enumeration: int = 10 ** 7
    wall_clock: float = 120.0


DEFAULT_BUDGET = OracleBudget()


class _Clock:
    def __init__(self, cap: float):
        self.cap = cap
        self.t0 = time.monotonic()

    def check(self):
        if time.monotonic() - self.t0 > self.cap:
            raise BudgetExceeded(f"wall-clock cap of {self.cap:g}s exceeded")


# -- vertex enumeration ---------------------------------------------------------------

def _independent_rows(A: np.ndarray, b: np.ndarray):
    keep: list[int] = []
    for r in range(A.shape[0]):
        if np.linalg.matrix_rank(A[keep + [r]], tol=1e-10) == len(keep) + 1:
            keep.append(r)
    return A[keep], b[keep]


def _vertices(A: np.ndarray, b: np.ndarray, allowed=None, budget: OracleBudget = DEFAULT_BUDGET) -> np.ndarray:
    """All basic feasible solutions of ``{x >= 0 : A x = b}``, one per row (deduplicated)."""
    A = np.asarray(A, float)
    n = A.shape[1]
    cols = np.arange(n) if allowed is None else np.flatnonzero(allowed)
    # rank is taken on the allowed columns: forbidding cells can make rows dependent
    A_full, b_full = A[:, cols], np.asarray(b, float)
    A, b = _independent_rows(A_full, b_full)
    r = A.shape[0]
    if r == 0:
        if np.any(np.abs(b_full) > FEAS_TOL):
            return np.zeros((0, n))
        return np.zeros((1, n))
    count = math.comb(cols.size, r)
    if count > budget.max_enumeration:
        raise BudgetExceeded(f"{count} column subsets exceed the enumeration cap")
    if count == 0:
        return np.zeros((0, n))
    subsets = np.array(list(itertools.combinations(range(cols.size), r)), dtype=int)
    out = []
    for lo in range(0, len(subsets), 20000):
        S = subsets[lo:lo + 20000]
        B = np.transpose(A[:, S], (1, 0, 2))  # (k, r, r)
        ok = np.abs(np.linalg.det(B)) > 1e-12
        if not np.any(ok):
            continue
        S, B = S[ok], B[ok]
        xb = np.linalg.solve(B, np.broadcast_to(b, (len(S), r))[..., None])[..., 0]
        feas = np.all(xb >= -FEAS_TOL, axis=1)
        for s, x in zip(S[feas], xb[feas]):
            if np.max(np.abs(A_full[:, s] @ x - b_full)) > FEAS_TOL:
                continue
            v = np.zeros(n)
            v[cols[s]] = np.maximum(x, 0.0)
            out.append(v)
    if not out:
        return np.zeros((0, n))
    V = np.array(out)
    # degenerate vertices appear once per basis; keep one copy
    _, idx = np.unique(np.round(V, 12), axis=0, return_index=True)
    return V[np.sort(idx)]


def transport_vertices(source: Kernel, target: Kernel, allowed=None, budget: OracleBudget = DEFAULT_BUDGET) -> np.ndarray:
    """Vertices of the transportation polytope, as an array ``(k, m, n)``."""
    m, n = len(source), len(target)
    if max(m, n) > budget.max_transport_atoms:
        raise BudgetExceeded(f"transport oracle limited to {budget.max_transport_atoms} atoms per side")
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A[m + j, j::n] = 1.0
    b = np.concatenate([source.probs, target.probs])
    mask = None if allowed is None else np.asarray(allowed, bool).ravel()
    V = _vertices(A, b, mask, budget)
    return V.reshape(-1, m, n)


def brute_transport(source: Kernel, target: Kernel, cost, budget: OracleBudget = DEFAULT_BUDGET) -> float:
    """Minimum of ``<pi, cost>`` over all vertices; ``inf`` entries are forbidden cells."""
    C = np.asarray(cost, dtype=float)
    allowed = np.isfinite(C)
    V = transport_vertices(source, target, allowed, budget)
    if len(V) == 0:
        raise ValueError("no feasible coupling on the allowed cells")
    Cf = np.where(allowed, C, 0.0)
    return float(min(np.sum(v * Cf) for v in V))


def one_step_vertices(source: Kernel, grid, delta: float, p: float, martingale: bool = False,
                      plan_class: PlanClass = "vertex", budget: OracleBudget = DEFAULT_BUDGET) -> np.ndarray:
    """Adversary plans for one node, as an array ``(k, m, |grid|)``.

    ``vertex``: every vertex of the budget polytope (its maximum of any
    linear payoff is the LP value).  ``map``: every Monge map ``x_i -> y_j(i)``
    within the budget.  ``bicausal``: vertices in which no grid point
    receives mass from two different atoms.
    """
    x, w = source.support, source.probs
    grid = np.asarray(grid, dtype=float)
    m, n = x.size, grid.size
    if m > budget.max_atoms or n > budget.max_grid:
        raise BudgetExceeded(f"kernel with {m} atoms and grid of {n} points exceeds the oracle budget")
    C = np.abs(x[:, None] - grid[None, :]) ** p
    cap = delta ** p * (1 + 1e-12) + 1e-15
    if plan_class == "map":
        plans = []
        for js in itertools.product(range(n), repeat=m):
            q = np.zeros((m, n))
            q[np.arange(m), js] = w
            if np.sum(q * C) > cap:
                continue
            if martingale and abs(float(np.sum(q * (x[:, None] - grid[None, :])))) > 1e-12:
                continue
            plans.append(q)
        return np.array(plans).reshape(-1, m, n)
    rows = m + 1 + int(martingale)
    A = np.zeros((rows, m * n + 1))
    for i in range(m):
        A[i, i * n:(i + 1) * n] = 1.0
    A[m, :m * n] = C.ravel()
    A[m, -1] = 1.0
    if martingale:
        A[m + 1, :m * n] = (x[:, None] - grid[None, :]).ravel()
    b = np.concatenate([w, [delta ** p], [0.0] if martingale else []])
    V = _vertices(A, b, budget=budget)[:, :m * n].reshape(-1, m, n)
    if plan_class == "bicausal":
        keep = [(v > FEAS_TOL).sum(axis=0).max() <= 1 for v in V]
        V = V[np.array(keep, dtype=bool)] if len(V) else V
    elif plan_class != "vertex":
        raise ValueError(f"unknown plan class {plan_class!r}")
    return V


# -- nested DRO enumeration -------------------------------------------------------------

def _grid_for(grids, kernel: Kernel, node, delta, p):
    from .dro import _resolve_grid  # grid bookkeeping only, no solver code

    g = _resolve_grid(grids, kernel, node, delta, p, 1)
    return np.unique(np.concatenate([np.asarray(g, float), kernel.support]))


def brute_dro(mu: AdaptedMeasure, cost: CostModel, K, delta: float, grids=None,
              plan_class: PlanClass = "vertex", martingale: bool = False,
              budget: OracleBudget = DEFAULT_BUDGET) -> float:
    """``min`` over predictable controls of ``max`` over composed adversaries of ``E[f]``.

    The adversary picks one plan from ``plan_class`` at every (reference
    node, perturbed history) pair; controls are picked from ``K.points`` at
    every such pair before the adversary moves.  ``f`` is evaluated on the
    full path of perturbed values and controls, so costs need not be
    semi-separable.  Per-state choices are independent, which makes the
    nested min/max equal to the min/max over full assignments.
    """
    N = mu.horizon
    if N > budget.max_horizon:
        raise BudgetExceeded(f"horizon {N} exceeds oracle limit {budget.max_horizon}")
    controls = [None]
    if cost.controlled:
        if K is None:
            raise ValueError("controlled cost needs a control grid")
        if K.n > budget.max_controls:
            raise BudgetExceeded(f"{K.n} controls exceed oracle limit {budget.max_controls}")
        controls = [float(a) for a in K.points]
    clock = _Clock(budget.wall_clock)
    p = mu.p

    plans: dict = {}
    grid_of: dict = {}
    for u in mu.internal_nodes():
        k = kernel_at(mu, u)
        g = _grid_for(grids, k, u, delta, p)
        depth = 0 if u is None else mu.node(u).depth
        cls = "vertex" if plan_class == "bicausal" and depth == N - 1 else plan_class
        grid_of[u] = g
        plans[u] = (k, one_step_vertices(k, g, delta, p, martingale, cls, budget))
        if len(plans[u][1]) == 0:
            raise ValueError(f"empty adversary set at node {u!r}")

    # rough count of leaf evaluations, checked before enumerating
    total = 1
    for t in range(N):
        width = max(len(plans[u][0]) * grid_of[u].size for u in ([None] if t == 0 else mu.layers[t - 1]))
        total *= width * len(controls)
    if total > budget.max_enumeration:
        raise BudgetExceeded(f"about {total} leaf evaluations exceed the enumeration cap")

    def value(u, y: tuple, a: tuple) -> float:
        clock.check()
        kern, V = plans[u]
        g = grid_of[u]
        depth = len(y)
        best = math.inf
        for alpha in controls:
            a2 = a if alpha is None else a + (alpha,)
            if depth == N - 1:
                Y = np.array([y + (gj,) for gj in g])
                acts = None if alpha is None else np.broadcast_to(np.array(a2), (len(g), N))
                row = cost.evaluate(Y, acts)
                G = np.broadcast_to(row, (len(kern), len(g)))
            else:
                G = np.array([[value(c, y + (gj,), a2) for gj in g] for c in kern.child_ids])
            v = float(np.max(np.einsum("kij,ij->k", V, G)))
            best = min(best, v)
        return best

    return value(None, (), ())


# -- adapted (p, inf) distance -----------------------------------------------------------

def brute_aw_inf(mu: AdaptedMeasure, nu: AdaptedMeasure, budget: OracleBudget = DEFAULT_BUDGET) -> float:
    """Minimum of the nested functional ``F_0`` over bicausal compositions of vertex couplings.

    At each node pair ``F = max((sum pi |x - y|^p)^(1/p), max_{pi_kl > 0} F_child)``.
    The functional is monotone in the children, so choosing per pair is the
    same as minimizing over whole compositions.
    """
    N = mu.horizon
    if N != nu.horizon:
        raise ValueError("horizon mismatch")
    if N > budget.max_horizon:
        raise BudgetExceeded(f"horizon {N} exceeds oracle limit {budget.max_horizon}")
    p = mu.p
    clock = _Clock(budget.wall_clock)
    memo: dict = {}

    def F(i, j) -> float:
        if (i, j) in memo:
            return memo[(i, j)]
        clock.check()
        ki, kj = kernel_at(mu, i), kernel_at(nu, j)
        if max(len(ki), len(kj)) > budget.max_atoms:
            raise BudgetExceeded("kernel larger than the oracle budget")
        leaf = mu.node(ki.child_ids[0]).depth == N
        D = np.abs(ki.support[:, None] - kj.support[None, :]) ** p
        best = math.inf
        for v in transport_vertices(ki, kj, budget=budget):
            val = float(np.sum(v * D)) ** (1.0 / p)
            if not leaf:
                for k, l in zip(*np.nonzero(v > FEAS_TOL)):
                    val = max(val, F(ki.child_ids[k], kj.child_ids[l]))
            best = min(best, val)
        memo[(i, j)] = best
        return best

    return F(None, None)


# -- property suite ------------------------------------------------------------------------

@dataclass
class PropertyReport:
    seed: int
    count: int
    checks: int = 0
    failures: list = field(default_factory=list)
    by_property: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def record(self, name: str, ok: bool, envelope: dict | None = None):
        self.checks += 1
        stats = self.by_property.setdefault(name, {"checks": 0, "failures": 0})
        stats["checks"] += 1
        if not ok:
            stats["failures"] += 1
            self.failures.append(envelope or {"property": name})

    def to_dict(self) -> dict:
        return {"seed": self.seed, "count": self.count, "checks": self.checks,
                "passed": self.passed, "by_property": self.by_property, "failures": self.failures}


def counterexample(prop: str, trees: list[AdaptedMeasure], expected, actual, **extra) -> dict:
    """JSON reproduction envelope: the trees in the input schema plus expected/actual."""
    doc = {"property": prop, "trees": [tree_to_dict(t) for t in trees],
           "expected": expected, "actual": actual}
    doc.update(extra)
    return doc


def dump_counterexample(doc: dict, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"counterexample_{doc['property']}_{len(list(d.glob('counterexample_*')))}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _triple(rng: np.random.Generator, seed: int):
    N = int(rng.integers(1, 4))
    p = float(rng.choice([1.0, 2.0]))
    return [random_tree(seed * 3 + k, N, (1, 3), p=p) for k in range(3)], N, p


def property_suite(seed: int = 0, count: int = 200, inject_bug: bool = False, dump_dir=None,
                   threads: int | None = None) -> PropertyReport:
    """Metric axioms, the distance inequalities, one-step duality and monotonicity
    on ``count`` seeded random instances.

    ``inject_bug`` perturbs one plan of every computed adapted coupling, a
    negative control: the coupling-consistency property must then fail.
    """
    from .adapted_metrics import adapted_wasserstein, adapted_wasserstein_inf, wasserstein
    from .transport import dro_one_step_dual, dro_one_step_martingale, dro_one_step_primal

    report = PropertyReport(seed, count)
    rng = np.random.default_rng(seed)
    for case in range(count):
        trees, N, p = _triple(rng, int(rng.integers(0, 2 ** 31)))
        mu, nu, rho = trees
        d = {}
        for a, b in [(0, 1), (1, 0), (0, 2), (1, 2), (0, 0)]:
            ta, tb = trees[a], trees[b]
            d[("W", a, b)] = wasserstein(ta, tb, threads).value
            aw = adapted_wasserstein(ta, tb, threads)
            d[("AW", a, b)] = aw.value
            d[("AWinf", a, b)] = adapted_wasserstein_inf(ta, tb, threads).value
            if (a, b) == (0, 1):
                if inject_bug:
                    root = aw.coupling[(None, None)]
                    root.matrix = root.matrix * 1.01
                re = aw.recompute()
                report.record("coupling_consistency", abs(re - aw.value) <= 1e-9 * (1 + aw.value),
                              counterexample("coupling_consistency", [mu, nu], aw.value, re, case=case))
        for name in ("W", "AW", "AWinf"):
            s1, s2 = d[(name, 0, 1)], d[(name, 1, 0)]
            report.record("symmetry", abs(s1 - s2) <= 1e-9,
                          counterexample("symmetry", [mu, nu], s1, s2, metric=name, case=case))
            z = d[(name, 0, 0)]
            report.record("identity", abs(z) <= 1e-9,
                          counterexample("identity", [mu], 0.0, z, metric=name, case=case))
            lhs, rhs = d[(name, 0, 2)], d[(name, 0, 1)] + d[(name, 1, 2)]
            report.record("triangle", lhs <= rhs + 1e-8,
                          counterexample("triangle", trees, rhs, lhs, metric=name, case=case))
        aw, awi, w = d[("AW", 0, 1)], d[("AWinf", 0, 1)], d[("W", 0, 1)]
        report.record("aw_le_scaled_awinf", aw <= N ** (1 / p) * awi + 1e-8,
                      counterexample("aw_le_scaled_awinf", [mu, nu], N ** (1 / p) * awi, aw, case=case))
        report.record("w_le_aw", w <= aw + 1e-9, counterexample("w_le_aw", [mu, nu], aw, w, case=case))

        # one-step DRO on the first kernel of mu
        k = kernel_at(mu)
        delta = float(rng.uniform(0.05, 1.0))
        lo, hi = k.support.min() - 2 * delta - 1, k.support.max() + 2 * delta + 1
        grid = np.unique(np.concatenate([k.support, np.linspace(lo, hi, 7 - len(k))]))
        G = rng.normal(size=(len(k), grid.size))
        pr = dro_one_step_primal(k, G, delta, p, grid)
        du = dro_one_step_dual(k, G, delta, p, grid)
        report.record("duality_gap", abs(pr.value - du.value) <= 1e-7 * (1 + abs(pr.value)),
                      counterexample("duality_gap", [mu], pr.value, du.value, payoff=G.tolist(),
                                     grid=grid.tolist(), delta=delta, case=case))
        ma = dro_one_step_martingale(k, G, delta, p, grid)
        report.record("martingale_le_plain", ma.value <= pr.value + 1e-9,
                      counterexample("martingale_le_plain", [mu], pr.value, ma.value, case=case))
        bigger = dro_one_step_primal(k, G, 1.5 * delta, p, grid)
        report.record("monotone_in_delta", bigger.value >= pr.value - 1e-9,
                      counterexample("monotone_in_delta", [mu], pr.value, bigger.value, case=case))
    if dump_dir is not None:
        for doc in report.failures:
            dump_counterexample(doc, dump_dir)
    return report
