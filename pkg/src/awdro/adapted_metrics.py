"""Wasserstein, adapted Wasserstein and adapted (p, inf)-Wasserstein distances
between scenario trees, computed by backward recursion over node pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from ._parallel import pmap
from .measures import AdaptedMeasure, Kernel, kernel_at, path_matrix
from .transport import TransportPlan, bottleneck_transport, solve_transport

Metric = Literal["W_p", "AW_p", "AW_p_inf"]
Pair = tuple  # (node of mu or None, node of nu or None)


@dataclass(eq=False)
class DistanceResult:
    """Distance value with the optimal coupling.

    For the adapted metrics ``coupling`` maps every node pair ``(i, j)``
    (``(None, None)`` for the first period) to the optimal one-step plan
    between their kernels, and ``table[t]`` holds the recursion values at
    depth ``t``.  For ``W_p`` it holds the single plan between path laws
    under key ``(None, None)``.
    """

    value: float
    metric: Metric
    p: float
    mu: AdaptedMeasure
    nu: AdaptedMeasure
    coupling: dict = field(default_factory=dict)
    table: list = field(default_factory=list)

    def recompute(self) -> float:
        """Value recomputed from the coupling forest alone."""
        p = self.p
        if self.metric == "W_p":
            plan = self.coupling[(None, None)]
            X, _ = path_matrix(self.mu)
            Y, _ = path_matrix(self.nu)
            cost = (np.abs(X[:, None, :] - Y[None, :, :]) ** p).sum(axis=2)
            return float(np.sum(plan.matrix * cost)) ** (1 / p)

        def walk(pair):
            plan = self.coupling[pair]
            kids_i = self.mu.children(pair[0])
            kids_j = self.nu.children(pair[1])
            leaf = self.mu.node(kids_i[0]).depth == self.mu.horizon
            step = plan.cost_p(p)
            cont = []
            for k, l in zip(*np.nonzero(plan.support_mask())):
                v = 0.0 if leaf else walk((kids_i[k], kids_j[l]))
                cont.append((plan.matrix[k, l], v))
            if self.metric == "AW_p":
                return step + sum(w * v for w, v in cont)
            return max([step ** (1 / p)] + [v for _, v in cont])

        v = walk((None, None))
        return v ** (1 / p) if self.metric == "AW_p" else v

    def to_dict(self, with_coupling: bool = False) -> dict:
        out = {"metric": self.metric, "value": self.value, "p": self.p}
        if with_coupling:
            out["coupling"] = [
                {"mu_node": i, "nu_node": j, "matrix": plan.matrix.tolist()}
                for (i, j), plan in self.coupling.items()
            ]
        return out


def _check_pair(mu: AdaptedMeasure, nu: AdaptedMeasure):
    if mu.horizon != nu.horizon:
        raise ValueError(f"horizon mismatch: {mu.horizon} vs {nu.horizon}")
    if mu.p != nu.p:
        raise ValueError(f"p mismatch: {mu.p} vs {nu.p}")


def wasserstein(mu: AdaptedMeasure, nu: AdaptedMeasure, threads: int | None = None) -> DistanceResult:
    """Plain ``W_p`` between the path laws with cost ``sum_t |x_t - y_t|^p``."""
    _check_pair(mu, nu)
    p = mu.p
    X, wx = path_matrix(mu)
    Y, wy = path_matrix(nu)
    cost = (np.abs(X[:, None, :] - Y[None, :, :]) ** p).sum(axis=2)
    src = Kernel(np.arange(len(wx), dtype=float), wx / wx.sum())
    tgt = Kernel(np.arange(len(wy), dtype=float), wy / wy.sum())
    plan = solve_transport(src, tgt, cost)
    plan.p = p
    value = max(plan.objective, 0.0) ** (1 / p)
    return DistanceResult(value, "W_p", p, mu, nu, {(None, None): plan})


def _backward(mu, nu, step, threads):
    """Run ``step(ki, kj, scores) -> (value, plan)`` over node pairs from the leaves up."""
    N = mu.horizon
    coupling: dict[Pair, TransportPlan] = {}
    table: list[dict] = [dict() for _ in range(N + 1)]
    for t in range(N - 1, -1, -1):
        ctx_i = [None] if t == 0 else list(mu.layers[t - 1])
        ctx_j = [None] if t == 0 else list(nu.layers[t - 1])
        pairs = [(i, j) for i in ctx_i for j in ctx_j]
        nxt = table[t + 1]

        def solve(pair):
            i, j = pair
            ki, kj = kernel_at(mu, i), kernel_at(nu, j)
            if t == N - 1:
                scores = np.zeros((len(ki), len(kj)))
            else:
                scores = np.array([[nxt[(a, b)] for b in kj.child_ids] for a in ki.child_ids])
            return step(ki, kj, scores)

        for pair, (val, plan) in zip(pairs, pmap(solve, pairs, threads)):
            table[t][pair] = val
            coupling[pair] = plan
    return table, coupling


def adapted_wasserstein(mu: AdaptedMeasure, nu: AdaptedMeasure, threads: int | None = None) -> DistanceResult:
    """``AW_p`` by the nested transport recursion; the table stores ``V_t`` (p-th powers)."""
    _check_pair(mu, nu)
    p = mu.p

    def step(ki, kj, cont):
        cost = np.abs(ki.support[:, None] - kj.support[None, :]) ** p + cont
        plan = solve_transport(ki, kj, cost)
        plan.p = p
        return plan.objective, plan

    table, coupling = _backward(mu, nu, step, threads)
    value = max(table[0][(None, None)], 0.0) ** (1 / p)
    return DistanceResult(value, "AW_p", p, mu, nu, coupling, table)


def adapted_wasserstein_inf(mu: AdaptedMeasure, nu: AdaptedMeasure, threads: int | None = None) -> DistanceResult:
    """``AW_p^inf`` by the bottleneck recursion ``A_t = min max(C_p, sup A_{t+1})``."""
    _check_pair(mu, nu)
    p = mu.p

    def step(ki, kj, scores):
        return bottleneck_transport(ki, kj, p, scores)

    table, coupling = _backward(mu, nu, step, threads)
    return DistanceResult(table[0][(None, None)], "AW_p_inf", p, mu, nu, coupling, table)


def all_distances(mu: AdaptedMeasure, nu: AdaptedMeasure, threads: int | None = None) -> dict[str, DistanceResult]:
    return {
        "w_p": wasserstein(mu, nu, threads),
        "aw_p": adapted_wasserstein(mu, nu, threads),
        "aw_p_inf": adapted_wasserstein_inf(mu, nu, threads),
    }
