"""Multiperiod Wasserstein DRO on scenario trees by dynamic programming.

The adversary perturbs each conditional law of the reference tree within the
one-step budget ``delta`` (closed ball).  Perturbed values live on a finite
grid per reference node, so the DPP state at depth ``t`` is a reference node
together with a perturbed history ``y_{1:t}``.  Histories are enumerated as
the product of the grids along the reference path.

Controlled problems require a semi-separable cost ``f = sum_t f_t(y_{1:t}, a_t)``;
then the value splits as ``sum_{s<=t} f_s + W_t(x_{1:t}, y_{1:t})`` and the
recursion for ``W`` does not depend on past controls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ._numerics import discrete_convex_argmin, golden_section
from ._parallel import pmap
from .costs import CostModel
from .measures import AdaptedMeasure, Kernel, is_martingale, kernel_at
from .transport import SUPPORT_TOL, OneStepLP, default_grid

MAX_STATES = 2_000_000
CHUNK = 32


class DroError(ValueError):
    pass


class NotMartingale(DroError):
    pass


@dataclass(frozen=True)
class ControlGrid:
    """Compact control set ``[lo, hi]`` with ``n`` equispaced candidates.

    ``polish=None`` refines by golden section exactly when the cost asserts
    convexity in the control.
    """

    lo: float = -1.0
    hi: float = 1.0
    n: int = 129
    polish: bool | None = None

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.hi < self.lo:
            raise DroError("control interval must be finite with lo <= hi")
        if self.n < 1:
            raise DroError("control grid needs at least one point")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    def polishing(self, cost: CostModel) -> bool:
        return cost.convex_in_control if self.polish is None else bool(self.polish)


GridSpec = None | int | Mapping | Callable[[Kernel, "str | None"], np.ndarray]


@dataclass(eq=False)
class ValueTable:
    """Backward-recursion values.

    ``histories[t][ctx]`` lists the perturbed histories (rows) of the states
    at reference node ``ctx`` of depth ``t`` (``None`` at ``t = 0``);
    ``values[t][ctx]`` and ``controls[t][ctx]`` are aligned with those rows.
    In terminal mode ``values[N]`` holds the payoff itself; in the
    semi-separable mode it holds the cost-to-go ``W_N = 0``.
    """

    values: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    histories: list = field(default_factory=list)
    grids: dict = field(default_factory=dict)


@dataclass(eq=False)
class JointNode:
    id: int
    parent: int | None
    depth: int
    x_node: str | None
    state: int
    x: tuple
    y: tuple
    prob: float  # conditional probability given the parent joint node
    control: float | None = None  # control for the next period, chosen at this node
    children: list = field(default_factory=list)


@dataclass(eq=False)
class DroSolution:
    value: float
    delta: float
    kind: str
    mu: AdaptedMeasure
    cost: CostModel
    control_grid: ControlGrid | None
    joint: list[JointNode]
    table: ValueTable
    diagnostics: dict = field(default_factory=dict)
    _adversary: AdaptedMeasure | None = None

    @property
    def adversary(self) -> AdaptedMeasure:
        """Law of the perturbed process under the extracted coupling."""
        if self._adversary is None:
            leaves = self.leaves()
            self._adversary = AdaptedMeasure.from_paths(
                [n.y for n in leaves], [self.path_prob(n) for n in leaves], self.mu.p
            )
        return self._adversary

    def leaves(self) -> list[JointNode]:
        N = self.mu.horizon
        return [n for n in self.joint if n.depth == N]

    def path_prob(self, node: JointNode) -> float:
        w = 1.0
        cur: JointNode | None = node
        while cur is not None and cur.parent is not None:
            w *= cur.prob
            cur = self.joint[cur.parent]
        return w

    def control_path(self, node: JointNode) -> list[float]:
        """Controls ``a_1..a_N`` used along the path ending at a leaf."""
        out = []
        cur = node
        while cur.parent is not None:
            cur = self.joint[cur.parent]
            out.append(cur.control)
        return list(reversed(out))

    def evaluate(self) -> float:
        """Expected cost of the extracted policy under the extracted coupling."""
        leaves = self.leaves()
        y = np.array([n.y for n in leaves])
        w = np.array([self.path_prob(n) for n in leaves])
        a = np.array([self.control_path(n) for n in leaves], dtype=float) if self.cost.controlled else None
        return float(w @ self.cost.evaluate(y, a))

    def policy(self) -> list[dict]:
        return [
            {"node": n.id, "depth": n.depth, "x": list(n.x), "y": list(n.y), "control": n.control}
            for n in self.joint
            if n.depth < self.mu.horizon
        ]

    def to_dict(self) -> dict:
        from .measures import tree_to_dict

        return {
            "kind": self.kind,
            "value": self.value,
            "delta": self.delta,
            "policy": self.policy(),
            "adversary_tree": tree_to_dict(self.adversary),
            "diagnostics": self.diagnostics,
        }


# -- engine --------------------------------------------------------------------------

def _resolve_grid(spec: GridSpec, kernel: Kernel, node, delta: float, p: float, m: int) -> np.ndarray:
    if spec is None:
        return default_grid(kernel, delta, p, m)
    if isinstance(spec, int):
        return default_grid(kernel, delta, p, spec)
    if callable(spec):
        return np.asarray(spec(kernel, node), dtype=float)
    if isinstance(spec, Mapping):
        if node not in spec:
            raise DroError(f"no target grid supplied for node {node!r}")
        return np.asarray(spec[node], dtype=float)
    raise DroError(f"unsupported grid specification {type(spec).__name__}")


class _Engine:
    def __init__(self, mu, cost, K, delta, grid, m, martingale, terminal, threads):
        if delta < 0 or not math.isfinite(delta):
            raise DroError("delta must be finite and nonnegative")
        self.mu, self.cost, self.delta = mu, cost, float(delta)
        self.K = K
        self.terminal = terminal
        self.threads = threads
        self.martingale = martingale
        self.N = mu.horizon
        self.p = mu.p
        self.controlled = cost.controlled
        self.points = K.points if (K is not None and self.controlled) else np.array([0.0])
        self.polish = bool(K is not None and self.controlled and K.polishing(cost) and K.n > 1)
        self.convex = bool(self.controlled and cost.convex_in_control)
        self.ctx = [[None]] + [list(layer) for layer in mu.layers[:-1]]
        self.kern: dict = {}
        self.lp: dict = {}
        self.grid: dict = {}
        for layer in self.ctx:
            for u in layer:
                k = kernel_at(mu, u)
                g = np.unique(_resolve_grid(grid, k, u, self.delta, self.p, m))
                self.kern[u], self.grid[u] = k, g
                self.lp[u] = OneStepLP(k, g, self.delta, self.p, martingale=martingale)
        # perturbed histories per context, built forward
        self.hist: dict = {None: np.zeros((1, 0))}
        total = 1
        for t in range(1, self.N):
            for u in self.ctx[t]:
                parent = mu.node(u).parent
                h, g = self.hist[parent], self.grid[parent]
                self.hist[u] = np.column_stack([np.repeat(h, g.size, axis=0), np.tile(g, h.shape[0])])
                total += self.hist[u].shape[0]
                if total > MAX_STATES:
                    raise DroError(f"more than {MAX_STATES} DPP states; use coarser grids")
        self.lp_solves = 0

    def child_hist(self, u) -> np.ndarray:
        h, g = self.hist[u], self.grid[u]
        return np.column_stack([np.repeat(h, g.size, axis=0), np.tile(g, h.shape[0])])

    # payoff matrix at state k of context u, as a function of the control
    def payoff_fn(self, u, k, W):
        g = self.grid[u]
        nY = g.size
        kids = self.kern[u].child_ids
        cont = np.stack([W[c][k * nY:(k + 1) * nY] for c in kids])
        if self.terminal:
            return lambda alpha: cont
        t = 0 if u is None else self.mu.node(u).depth
        yp = np.column_stack([np.repeat(self.hist[u][k][None, :], nY, axis=0), g])
        return lambda alpha: cont + self.cost.part(t + 1, yp, alpha)[None, :]

    def payoff(self, u, k, W, alpha):
        return self.payoff_fn(u, k, W)(alpha)

    def control_search(self, phi: Callable[[float], float]) -> tuple[float, float]:
        pts = self.points
        cache: dict[int, float] = {}

        def f(j):
            if j not in cache:
                cache[j] = phi(float(pts[j]))
            return cache[j]

        if len(pts) == 1:
            return float(pts[0]), f(0)
        if self.convex:
            k = discrete_convex_argmin(f, len(pts), tol=1e-12)
        else:
            vals = [f(j) for j in range(len(pts))]
            vmin = min(vals)
            k = next(j for j, v in enumerate(vals) if v <= vmin + 1e-12 * (1 + abs(vmin)))
        a_best, v_best = float(pts[k]), f(k)
        if self.polish:
            lo = float(pts[max(k - 1, 0)])
            hi = float(pts[min(k + 1, len(pts) - 1)])
            x, fx = golden_section(phi, lo, hi, tol=1e-9 * max(1.0, self.K.hi - self.K.lo))
            if fx < v_best:
                a_best, v_best = x, fx
        return a_best, v_best

    def solve_chunk(self, job):
        u, k0, k1, W = job
        lp = self.lp[u]
        basis = None
        vals, ctrls = [], []
        for k in range(k0, k1):
            state = {"basis": basis}
            G = self.payoff_fn(u, k, W)

            def phi(a):
                value, state["basis"] = lp.value(G(a), state["basis"])
                return value

            a, v = self.control_search(phi)
            basis = state["basis"]
            vals.append(v)
            ctrls.append(a)
        return vals, ctrls

    def backward(self) -> ValueTable:
        N = self.N
        table = ValueTable(
            values=[dict() for _ in range(N + 1)],
            controls=[dict() for _ in range(N)],
            histories=[dict() for _ in range(N + 1)],
            grids=self.grid,
        )
        W: dict = {}
        for u in self.ctx[N - 1]:
            h = self.child_hist(u)
            for c in self.kern[u].child_ids:
                table.histories[N][c] = h
                if self.terminal:
                    W[c] = self.cost.evaluate(h)
                else:
                    W[c] = np.zeros(h.shape[0])
                table.values[N][c] = W[c]
        for t in range(N - 1, -1, -1):
            jobs = []
            for u in self.ctx[t]:
                n = self.hist[u].shape[0]
                for k0 in range(0, n, CHUNK):
                    jobs.append((u, k0, min(n, k0 + CHUNK), W))
            results = pmap(self.solve_chunk, jobs, self.threads)
            new_vals: dict = {u: [] for u in self.ctx[t]}
            new_ctrl: dict = {u: [] for u in self.ctx[t]}
            for (u, _, _, _), (vals, ctrls) in zip(jobs, results):
                new_vals[u].extend(vals)
                new_ctrl[u].extend(ctrls)
            for u in self.ctx[t]:
                W[u] = np.array(new_vals[u])
                table.values[t][u] = W[u]
                table.controls[t][u] = np.array(new_ctrl[u])
                table.histories[t][u] = self.hist[u]
        self.W = W
        return table

    # -- forward extraction --------------------------------------------------------
    def plan_at(self, u, k, alpha):
        lp = self.lp[u]
        res = lp.solve(self.payoff(u, k, self.W, alpha))
        q = res.plan.matrix
        if not (self.convex and self.delta > 0 and self.K is not None and self.K.n > 1):
            return q, res.value
        return self.saddle_plan(u, k, alpha, res.value, q)

    def saddle_plan(self, u, k, alpha, v_star, q_star):
        """Mix two best responses so that ``alpha`` is optimal against the mixture.

        Best responses just left and right of ``alpha`` are also best
        responses at ``alpha``; their control derivatives bracket zero when
        ``alpha`` is an interior minimizer, and the mixture with zero
        derivative is a saddle point of the one-step game.
        """
        lp = self.lp[u]
        lo, hi = self.K.lo, self.K.hi
        width = max(hi - lo, 1e-12)
        tol = 1e-9 * (1 + abs(v_star))

        def lagr(a, q):
            return float(np.sum(q * self.payoff(u, k, self.W, a)))

        h = 1e-6 * width
        for eta in (1e-7 * width, 1e-9 * width, 1e-11 * width):
            a1, a2 = max(lo, alpha - eta), min(hi, alpha + eta)
            q1 = lp.solve(self.payoff(u, k, self.W, a1)).plan.matrix
            q2 = lp.solve(self.payoff(u, k, self.W, a2)).plan.matrix
            if lagr(alpha, q1) < v_star - tol or lagr(alpha, q2) < v_star - tol:
                continue
            d1 = (lagr(alpha + h, q1) - lagr(alpha - h, q1)) / (2 * h)
            d2 = (lagr(alpha + h, q2) - lagr(alpha - h, q2)) / (2 * h)
            if d1 <= 0 <= d2 and d2 > d1:
                theta = d2 / (d2 - d1)
                q = theta * q1 + (1 - theta) * q2
                return q, lagr(alpha, q)
            break
        return q_star, v_star

    def forward(self) -> list[JointNode]:
        mu = self.mu
        root = JointNode(0, None, 0, None, 0, (), (), 1.0)
        nodes = [root]
        frontier = [root]
        for t in range(self.N):
            nxt = []
            for nd in frontier:
                u, k = nd.x_node, nd.state
                alpha = float(self.table.controls[t][u][k]) if self.controlled else None
                nd.control = alpha
                q, _ = self.plan_at(u, k, alpha)
                g = self.grid[u]
                kids = self.kern[u].child_ids
                for i, j in zip(*np.nonzero(q > SUPPORT_TOL)):
                    c = kids[i]
                    child = JointNode(
                        len(nodes), nd.id, t + 1, c, k * g.size + int(j),
                        nd.x + (mu.node(c).value,), nd.y + (float(g[j]),), float(q[i, j]),
                    )
                    nd.children.append(child.id)
                    nodes.append(child)
                    nxt.append(child)
            frontier = nxt
        return nodes


def _run(mu, cost, K, delta, grid, m, martingale, terminal, kind, threads) -> DroSolution:
    eng = _Engine(mu, cost, K, delta, grid, m, martingale, terminal, threads)
    eng.table = eng.backward()
    value = float(eng.table.values[0][None][0])
    joint = eng.forward()
    diag = {
        "grid_sizes": {str(u): int(g.size) for u, g in eng.grid.items()},
        "states_per_depth": [int(sum(eng.hist[u].shape[0] for u in layer)) for layer in eng.ctx],
        "control_points": int(len(eng.points)),
        "polish": eng.polish,
        "joint_nodes": len(joint),
    }
    sol = DroSolution(value, float(delta), kind, mu, cost, K if cost.controlled else None, joint, eng.table, diag)
    return sol


def solve_uncontrolled(mu: AdaptedMeasure, cost: CostModel, delta: float, grid: GridSpec = None,
                       m: int = 64, threads: int | None = None) -> DroSolution:
    """``sup E[f(Y)]`` over laws within ``delta`` of ``mu`` in the adapted (p, inf) distance."""
    if cost.controlled:
        raise DroError("solve_uncontrolled needs a cost without controls")
    return _run(mu, cost, None, delta, grid, m, False, True, "uncontrolled", threads)


def solve_controlled(mu: AdaptedMeasure, cost: CostModel, K: ControlGrid | None, delta: float,
                     grid: GridSpec = None, m: int = 64, threads: int | None = None) -> DroSolution:
    """``inf_a sup E[f(Y, a)]`` over predictable controls in ``K``, via the semi-separable DPP."""
    if not cost.semi_separable:
        raise DroError("controlled DPP needs a semi-separable decomposition of the cost")
    if cost.controlled and K is None:
        raise DroError("controlled cost needs a control grid")
    return _run(mu, cost, K, delta, grid, m, False, False, "controlled", threads)


def solve_martingale(mu: AdaptedMeasure, cost: CostModel, K: ControlGrid | None, delta: float,
                     grid: GridSpec = None, m: int = 64, threads: int | None = None) -> DroSolution:
    """As :func:`solve_controlled` with mean-preserving one-step perturbations."""
    if not is_martingale(mu):
        raise NotMartingale("reference tree is not a martingale")
    if not cost.semi_separable:
        raise DroError("controlled DPP needs a semi-separable decomposition of the cost")
    if cost.controlled and K is None:
        raise DroError("controlled cost needs a control grid")
    return _run(mu, cost, K, delta, grid, m, True, False, "martingale", threads)


# -- certificates ------------------------------------------------------------------------

def best_response(sol: DroSolution) -> tuple[float, dict[int, float]]:
    """Optimal predictable control against the extracted coupling, by backward recursion
    over the joint tree.  Candidates are the control grid, the DPP control at
    the node, and a golden-section polish when convexity is asserted."""
    cost, K = sol.cost, sol.control_grid
    N = sol.mu.horizon
    br: dict[int, float] = {}
    ctrl: dict[int, float] = {}
    for nd in reversed(sol.joint):
        if nd.depth == N:
            br[nd.id] = 0.0
            continue
        kids = [sol.joint[c] for c in nd.children]
        w = np.array([c.prob for c in kids])
        y = np.array([c.y for c in kids])
        cont = np.array([br[c.id] for c in kids])

        def phi(a):
            return float(w @ (cost.part(nd.depth + 1, y, a) + cont))

        if not cost.controlled:
            br[nd.id] = phi(0.0)
            continue
        cands = [(phi(float(a)), float(a)) for a in K.points]
        if nd.control is not None:
            cands.append((phi(nd.control), nd.control))
        v, a = min(cands)
        if cost.convex_in_control and K.n > 1:
            step = (K.hi - K.lo) / (K.n - 1)
            x, fx = golden_section(phi, max(K.lo, a - step), min(K.hi, a + step), tol=1e-10 * max(1.0, K.hi - K.lo))
            if fx < v:
                v, a = fx, x
        br[nd.id], ctrl[nd.id] = v, a
    return br[0], ctrl


def minimax_gap(sol: DroSolution) -> float:
    """``inf sup - sup inf`` certificate: the DPP value minus the best response to
    the extracted adversary.  Nonnegative up to rounding."""
    if sol.delta == 0:
        return 0.0
    lower, _ = best_response(sol)
    sol.diagnostics["sup_inf_bound"] = lower
    return sol.value - lower


def causal_equals_bicausal_probe(mu: AdaptedMeasure, cost: CostModel, K: ControlGrid | None, delta: float,
                                 grid: GridSpec) -> tuple[float, float, float]:
    """Compare the causal DPP value with the oracle value over bicausal
    (no-merge) adversaries on the same grids."""
    from .oracle import brute_dro

    if K is not None:
        K = ControlGrid(K.lo, K.hi, K.n, polish=False)
    causal = solve_controlled(mu, cost, K, delta, grid=grid).value
    bicausal = brute_dro(mu, cost, K, delta, grid, plan_class="bicausal")
    return causal, bicausal, causal - bicausal
