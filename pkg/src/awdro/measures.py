"""Finitely supported laws of scalar discrete-time processes as scenario trees.

A tree of horizon ``N`` stores one node per distinct history ``x_{1:t}``.
Depth-1 nodes have no parent; their probabilities are the first-period law.
Every other node carries its conditional probability given the parent.
Nodes are kept in canonical form: siblings sorted by value, equal-valued
siblings merged.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import jsonschema
import numpy as np

INPUT_TOL = 1e-9
INTERNAL_TOL = 1e-12

TREE_SCHEMA = {
    "type": "object",
    "required": ["horizon", "p", "nodes"],
    "properties": {
        "horizon": {"type": "integer", "minimum": 1},
        "p": {"type": "number", "minimum": 1},
        "nodes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "depth", "value", "prob", "parent"],
                "properties": {
                    "id": {"type": ["string", "integer"]},
                    "depth": {"type": "integer", "minimum": 1},
                    "value": {"type": "number"},
                    "prob": {"type": "number"},
                    "parent": {"type": ["string", "integer", "null"]},
                },
            },
        },
    },
}


class TreeError(ValueError):
    """Invalid scenario-tree input. ``node`` names the offending node when known."""

    def __init__(self, message: str, node: str | None = None, line: int | None = None):
        self.node = node
        self.line = line
        super().__init__(message)

    def __str__(self) -> str:
        msg = self.args[0]
        if self.line is not None:
            return f"line {self.line}: {msg}"
        return msg


@dataclass(frozen=True)
class TreeNode:
    id: str
    depth: int
    value: float
    prob: float
    parent: str | None
    children: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class Kernel:
    """One-step conditional law: sorted support with positive weights."""

    support: np.ndarray
    probs: np.ndarray
    context: str | None = None
    child_ids: tuple[str, ...] = ()

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float)
        w = np.asarray(self.probs, dtype=float)
        if s.ndim != 1 or s.shape != w.shape or s.size == 0:
            raise ValueError("kernel support and probabilities must be 1-D of equal length")
        if np.any(w <= 0):
            raise ValueError("kernel probabilities must be positive")
        if abs(w.sum() - 1.0) > INTERNAL_TOL * max(1, s.size):
            raise ValueError(f"kernel probabilities sum to {w.sum()!r}")
        if s.size > 1 and np.any(np.diff(s) <= 0):
            raise ValueError("kernel support must be strictly increasing")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "probs", w)

    @classmethod
    def from_atoms(cls, atoms: dict[float, float] | Iterable[tuple[float, float]], context=None) -> "Kernel":
        """Build from ``{value: mass}`` pairs; merges equal values and sorts."""
        items = atoms.items() if isinstance(atoms, dict) else atoms
        acc: dict[float, float] = {}
        for v, w in items:
            acc[float(v)] = acc.get(float(v), 0.0) + float(w)
        vals = sorted(acc)
        return cls(np.array(vals), np.array([acc[v] for v in vals]), context)

    def __len__(self) -> int:
        return self.support.size

    def mean(self) -> float:
        return float(self.probs @ self.support)


@dataclass(eq=False)
class _Raw:
    id: str
    depth: int
    value: float
    prob: float
    parent: str | None
    order: int
    children: list = field(default_factory=list)


class AdaptedMeasure:
    """Immutable scenario tree.

    Nodes are addressed by string id.  ``layers[t-1]`` lists the ids at depth
    ``t`` in canonical order (parents in order, siblings by value), so the
    last layer enumerates leaves in lexicographic path order.
    """

    def __init__(self, horizon: int, p: float, nodes: Sequence[TreeNode]):
        self.horizon = int(horizon)
        self.p = float(p)
        if self.horizon < 1:
            raise TreeError("horizon must be >= 1")
        if not self.p >= 1:
            raise TreeError("p must be >= 1")
        self._nodes: dict[str, TreeNode] = {}
        for nd in nodes:
            if nd.id in self._nodes:
                raise TreeError(f"duplicate node id {nd.id!r}", nd.id)
            self._nodes[nd.id] = nd
        self._roots = tuple(nd.id for nd in nodes if nd.parent is None)
        layers = [self._roots]
        for _ in range(1, self.horizon):
            layers.append(tuple(c for i in layers[-1] for c in self._nodes[i].children))
        self.layers: tuple[tuple[str, ...], ...] = tuple(layers)
        self._check()
        self._path_prob: dict[str, float] = {}
        for t, layer in enumerate(self.layers):
            for i in layer:
                nd = self._nodes[i]
                base = 1.0 if nd.parent is None else self._path_prob[nd.parent]
                self._path_prob[i] = base * nd.prob

    def _check(self):
        if sum(len(layer) for layer in self.layers) != len(self._nodes):
            raise TreeError("tree contains unreachable nodes")
        groups = [(None, self._roots)] + [(i, nd.children) for i, nd in self._nodes.items()]
        for parent, kids in groups:
            depth = 1 if parent is None else self._nodes[parent].depth + 1
            if parent is not None and depth > self.horizon:
                if kids:
                    raise TreeError(f"node {parent!r} has children beyond the horizon", parent)
                continue
            if not kids:
                raise TreeError(f"node {parent!r} at depth {depth - 1} has no children", parent)
            vals = [self._nodes[c].value for c in kids]
            probs = [self._nodes[c].prob for c in kids]
            if any(not math.isfinite(v) for v in vals):
                raise TreeError("node values must be finite", parent)
            if any(not (w > 0) for w in probs):
                raise TreeError("conditional probabilities must be positive", parent)
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise TreeError("siblings must be sorted with distinct values", parent)
            if abs(math.fsum(probs) - 1.0) > INTERNAL_TOL:
                raise TreeError(f"probabilities under {parent!r} sum to {math.fsum(probs)!r}", parent)
            for c in kids:
                if self._nodes[c].depth != depth or self._nodes[c].parent != parent:
                    raise TreeError(f"inconsistent parent/depth at node {c!r}", c)

    # accessors -----------------------------------------------------------
    @property
    def q(self) -> float:
        return math.inf if self.p == 1 else self.p / (self.p - 1)

    @property
    def nodes(self) -> list[TreeNode]:
        return [self._nodes[i] for layer in self.layers for i in layer]

    @property
    def roots(self) -> tuple[str, ...]:
        return self._roots

    @property
    def leaves(self) -> tuple[str, ...]:
        return self.layers[-1]

    def node(self, node_id: str) -> TreeNode:
        return self._nodes[node_id]

    def children(self, node_id: str | None) -> tuple[str, ...]:
        return self._roots if node_id is None else self._nodes[node_id].children

    def path_prob(self, node_id: str) -> float:
        return self._path_prob[node_id]

    def path_values(self, node_id: str) -> tuple[float, ...]:
        out = []
        cur: str | None = node_id
        while cur is not None:
            nd = self._nodes[cur]
            out.append(nd.value)
            cur = nd.parent
        return tuple(reversed(out))

    def ancestors(self, node_id: str) -> tuple[str, ...]:
        """Ids along the path from depth 1 down to ``node_id`` inclusive."""
        out = []
        cur: str | None = node_id
        while cur is not None:
            out.append(cur)
            cur = self._nodes[cur].parent
        return tuple(reversed(out))

    def internal_nodes(self) -> list[str | None]:
        """Contexts with a kernel: the virtual root (None) and all non-leaves."""
        return [None] + [i for layer in self.layers[:-1] for i in layer]

    def __repr__(self) -> str:
        return f"AdaptedMeasure(N={self.horizon}, p={self.p:g}, leaves={len(self.leaves)})"

    # constructors --------------------------------------------------------
    @classmethod
    def from_paths(cls, paths, probs, p: float = 2.0) -> "AdaptedMeasure":
        """Tree of the discrete law ``sum_k probs[k] * delta_{paths[k]}``."""
        paths = [tuple(float(v) for v in path) for path in paths]
        probs = [float(w) for w in probs]
        if not paths or len(paths) != len(probs):
            raise TreeError("paths and probabilities must be non-empty and aligned")
        horizon = len(paths[0])
        if any(len(path) != horizon for path in paths):
            raise TreeError("all paths must have the same length")
        if any(not (w > 0) for w in probs):
            raise TreeError("path probabilities must be positive")
        total = math.fsum(probs)
        if abs(total - 1.0) > INPUT_TOL:
            raise TreeError(f"probability sum {total:g} ≠ 1")
        probs = [w / total for w in probs]
        nodes: list[TreeNode] = []
        counter = [0] * (horizon + 1)

        def build(members: list[int], depth: int, parent: str | None, parent_mass: float) -> list[str]:
            groups: dict[float, list[int]] = {}
            for k in members:
                groups.setdefault(paths[k][depth - 1], []).append(k)
            ids = []
            for v in sorted(groups):
                mass = math.fsum(probs[k] for k in groups[v])
                nid = f"n{depth}_{counter[depth]}"
                counter[depth] += 1
                ids.append(nid)
                kids = build(groups[v], depth + 1, nid, mass) if depth < horizon else []
                nodes.append(TreeNode(nid, depth, v, mass / parent_mass, parent, tuple(kids)))
            return ids

        build(list(range(len(paths))), 1, None, 1.0)
        nodes.sort(key=lambda nd: (nd.depth, int(nd.id.split("_")[1])))
        return cls(horizon, p, nodes)

    @classmethod
    def dirac(cls, path: Sequence[float], p: float = 2.0) -> "AdaptedMeasure":
        return cls.from_paths([tuple(path)], [1.0], p)


# -- ingestion ----------------------------------------------------------------

def _canonical_nodes(raws: dict[str, _Raw], roots: list[_Raw]) -> list[TreeNode]:
    """Merge equal-valued siblings and sort; merged nodes keep the first id."""
    out: list[TreeNode] = []

    def emit(members: list[tuple[_Raw, float]], parent: str | None, prob: float, depth: int):
        head = min((m for m, _ in members), key=lambda r: r.order)
        total = math.fsum(w for _, w in members)
        kids_w: list[tuple[_Raw, float]] = []
        for m, w in members:
            scale = w / total
            kids_w.extend((c, c.prob if scale == 1.0 else scale * c.prob) for c in m.children)
        child_groups = _group_by_value(kids_w)
        child_ids = tuple(min((m for m, _ in g), key=lambda r: r.order).id for g in child_groups)
        out.append(TreeNode(head.id, depth, head.value, prob, parent, child_ids))
        for g in child_groups:
            emit(g, head.id, math.fsum(w for _, w in g), depth + 1)

    for g in _group_by_value([(r, r.prob) for r in roots]):
        emit(g, None, math.fsum(w for _, w in g), 1)
    out.sort(key=lambda nd: nd.depth)
    # the stable sort keeps the depth-first emission order inside a layer,
    # which is parent order then value order
    return out


def _group_by_value(items: list[tuple[_Raw, float]]) -> list[list[tuple[_Raw, float]]]:
    groups: dict[float, list[tuple[_Raw, float]]] = {}
    for r, w in items:
        groups.setdefault(r.value, []).append((r, w))
    return [groups[v] for v in sorted(groups)]


def _normalize(group: list[_Raw], where: str | None):
    total = math.fsum(r.prob for r in group)
    if abs(total - 1.0) > INPUT_TOL:
        probs = ", ".join(f"{r.prob:g}" for r in group)
        # anchor at the parent, or at the first member for the root group
        raise TreeError(f"probability sum {total:g} ≠ 1 (children of {where!r}: {probs})",
                        where if where is not None else group[0].id)
    # exact-rounding sums are left alone so canonical documents round-trip bit for bit
    if abs(total - 1.0) > 4 * np.finfo(float).eps * len(group):
        for r in group:
            r.prob /= total


def tree_from_dict(doc: dict[str, Any]) -> AdaptedMeasure:
    """Validate a parsed JSON tree document and return its canonical tree."""
    try:
        jsonschema.validate(doc, TREE_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(x) for x in exc.absolute_path)
        node = None
        if len(exc.absolute_path) >= 2 and exc.absolute_path[0] == "nodes":
            item = doc["nodes"][exc.absolute_path[1]]
            node = str(item.get("id")) if isinstance(item, dict) and "id" in item else None
        raise TreeError(f"schema violation at /{loc}: {exc.message}", node) from None
    horizon = int(doc["horizon"])
    raws: dict[str, _Raw] = {}
    for k, item in enumerate(doc["nodes"]):
        nid = str(item["id"])
        if nid in raws:
            raise TreeError(f"duplicate node id {nid!r}", nid)
        value = float(item["value"])
        prob = float(item["prob"])
        if not math.isfinite(value):
            raise TreeError(f"non-finite value at node {nid!r}", nid)
        if not (prob > 0):
            raise TreeError(f"non-positive probability {prob:g} at node {nid!r}", nid)
        parent = None if item["parent"] is None else str(item["parent"])
        raws[nid] = _Raw(nid, int(item["depth"]), value, prob, parent, k)
    roots = []
    for r in raws.values():
        if r.parent is None:
            if r.depth != 1:
                raise TreeError(f"depth gap: root node {r.id!r} has depth {r.depth}", r.id)
            roots.append(r)
            continue
        par = raws.get(r.parent)
        if par is None:
            raise TreeError(f"orphan node {r.id!r}: parent {r.parent!r} not found", r.id)
        if r.depth != par.depth + 1:
            raise TreeError(f"depth gap: node {r.id!r} has depth {r.depth}, parent has {par.depth}", r.id)
        par.children.append(r)
    if not roots:
        raise TreeError("tree has no depth-1 nodes")
    for r in raws.values():
        if r.depth > horizon:
            raise TreeError(f"depth gap: node {r.id!r} lies beyond horizon {horizon}", r.id)
        if r.depth < horizon and not r.children:
            raise TreeError(f"depth gap: node {r.id!r} at depth {r.depth} has no children", r.id)
    _normalize(roots, None)
    for r in raws.values():
        if r.children:
            _normalize(r.children, r.id)
    return AdaptedMeasure(horizon, float(doc["p"]), _canonical_nodes(raws, roots))


def _line_of(text: str, node: str | None) -> int | None:
    if node is None:
        return None
    pat = re.compile(r'"id"\s*:\s*"?' + re.escape(node) + r'"?\s*[,}]')
    m = pat.search(text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_tree(source: str | Path | dict) -> AdaptedMeasure:
    """Load a tree from a parsed document, a JSON string or a file path.

    Errors are raised as :class:`TreeError`; for text input the message is
    anchored to the line of the offending node when it can be located.
    """
    if isinstance(source, dict):
        return tree_from_dict(source)
    text = str(source)
    if isinstance(source, Path) or not text.lstrip().startswith("{"):
        text = Path(source).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    try:
        return tree_from_dict(doc)
    except TreeError as exc:
        exc.line = _line_of(text, exc.node)
        raise


def tree_to_dict(m: AdaptedMeasure) -> dict[str, Any]:
    return {
        "horizon": m.horizon,
        "p": m.p,
        "nodes": [
            {"id": nd.id, "depth": nd.depth, "value": nd.value, "prob": nd.prob, "parent": nd.parent}
            for nd in m.nodes
        ],
    }


def dump_tree(m: AdaptedMeasure, path: str | Path | None = None) -> str:
    text = json.dumps(tree_to_dict(m), indent=1)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


# -- derived views -----------------------------------------------------------

def kernel_at(m: AdaptedMeasure, node: str | None = None) -> Kernel:
    """Conditional law of the next value given the history ending at ``node``.

    ``node=None`` is the virtual root and yields the first-period law.
    """
    if node is not None:
        if node not in m._nodes:
            raise KeyError(node)
        if m.node(node).depth >= m.horizon:
            raise TreeError(f"node {node!r} is a leaf and has no kernel", node)
    kids = m.children(node)
    return Kernel(
        np.array([m.node(c).value for c in kids]),
        np.array([m.node(c).prob for c in kids]),
        node,
        kids,
    )


def flatten(m: AdaptedMeasure) -> list[tuple[tuple[float, ...], float]]:
    """Leaf paths ``x_{1:N}`` with their probabilities, in canonical leaf order."""
    return [(m.path_values(i), m.path_prob(i)) for i in m.leaves]


def path_matrix(m: AdaptedMeasure) -> tuple[np.ndarray, np.ndarray]:
    """Leaf paths as an ``(n_leaves, N)`` array and their probabilities."""
    flat = flatten(m)
    return np.array([path for path, _ in flat]), np.array([w for _, w in flat])


def is_martingale(m: AdaptedMeasure, tol: float = INPUT_TOL) -> bool:
    for layer in m.layers[:-1]:
        for i in layer:
            if abs(kernel_at(m, i).mean() - m.node(i).value) > tol:
                return False
    return True


# -- generators ----------------------------------------------------------------

def _distinct(values: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    values = np.sort(values)
    while values.size > 1 and np.any(np.diff(values) <= 1e-9 * scale):
        values = np.sort(values + rng.uniform(-1e-6, 1e-6, values.size) * scale)
    return values


def _nodes_from_spec(horizon, spec) -> list[TreeNode]:
    # spec: list of (id, depth, value, prob, parent) in BFS order
    kids: dict[str | None, list[str]] = {}
    for nid, _, _, _, parent in spec:
        kids.setdefault(parent, []).append(nid)
    return [TreeNode(nid, d, v, w, parent, tuple(kids.get(nid, ()))) for nid, d, v, w, parent in spec]


def random_tree(
    seed: int,
    N: int,
    branching: int | tuple[int, int] = 2,
    value_range: tuple[float, float] = (-1.0, 1.0),
    p: float = 2.0,
) -> AdaptedMeasure:
    """Seeded random tree.

    ``branching`` is a fixed number of children per node or an inclusive
    ``(lo, hi)`` range drawn per node.  Values are uniform on ``value_range``
    and jittered apart; conditional weights are bounded away from zero.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    lo_b, hi_b = (branching, branching) if isinstance(branching, int) else branching
    if lo_b < 1 or hi_b < lo_b:
        raise ValueError("branching must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = value_range
    spec = []
    frontier: list[str | None] = [None]
    for depth in range(1, N + 1):
        nxt = []
        for parent in frontier:
            b = int(rng.integers(lo_b, hi_b + 1))
            vals = _distinct(rng.uniform(lo, hi, b), rng, hi - lo)
            w = rng.uniform(0.2, 1.0, b)
            w = w / w.sum()
            for k in range(b):
                nid = f"n{depth}_{len(nxt)}"
                spec.append((nid, depth, float(vals[k]), float(w[k]), parent))
                nxt.append(nid)
        frontier = nxt
    return AdaptedMeasure(N, p, _nodes_from_spec(N, spec))


def random_martingale_tree(
    seed: int,
    N: int,
    branching: int | tuple[int, int] = 2,
    spread: float = 1.0,
    x0: float = 0.0,
    p: float = 2.0,
) -> AdaptedMeasure:
    """Seeded random tree whose kernels at depth >= 1 have mean equal to the current value.

    The first-period law is centred at ``x0``.  Kernels with a single child
    are deterministic continuations.
    """
    lo_b, hi_b = (branching, branching) if isinstance(branching, int) else branching
    rng = np.random.default_rng(seed)
    spec = []
    frontier: list[tuple[str | None, float]] = [(None, x0)]
    for depth in range(1, N + 1):
        nxt = []
        for parent, xv in frontier:
            b = int(rng.integers(lo_b, hi_b + 1))
            w = rng.uniform(0.2, 1.0, b)
            w = w / w.sum()
            if b == 1:
                vals = np.array([xv])
            else:
                d = _distinct(rng.uniform(-spread, spread, b), rng, spread)
                d = d - w @ d
                vals = xv + d
            for k in range(b):
                nid = f"n{depth}_{len(nxt)}"
                spec.append((nid, depth, float(vals[k]), float(w[k]), parent))
                nxt.append((nid, float(vals[k])))
        frontier = nxt
    return AdaptedMeasure(N, p, _nodes_from_spec(N, spec))


def binomial_tree(N: int, x0: float = 1.0, up: float = 1.2, down: float = 0.8, p: float = 2.0) -> AdaptedMeasure:
    """Recombining-free multiplicative binomial martingale started from ``x0``."""
    if not down < 1 < up:
        raise ValueError("need down < 1 < up")
    w_up = (1 - down) / (up - down)
    spec = []
    frontier: list[tuple[str | None, float]] = [(None, x0)]
    for depth in range(1, N + 1):
        nxt = []
        for parent, xv in frontier:
            for v, w in ((xv * down, 1 - w_up), (xv * up, w_up)):
                nid = f"n{depth}_{len(nxt)}"
                spec.append((nid, depth, v, w, parent))
                nxt.append((nid, v))
        frontier = nxt
    return AdaptedMeasure(N, p, _nodes_from_spec(N, spec))
