"""Cost models ``f(y_{1:N}, a_{1:N})`` for the DRO and sensitivity solvers.

Costs are vectorized: ``y`` and ``a`` are arrays of shape ``(n, N)`` and the
result has shape ``(n,)``.  A semi-separable cost additionally provides parts
``f_t(y_{1:t}, a_t)`` with ``f = sum_t f_t``.

Expressions use a small grammar::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" unary)?
    atom   := number | y<t> | a<t> | fn "(" expr ("," expr)* ")" | "(" expr ")"
    fn     := max | min | abs

Exponents must be constant.  Derivatives are taken symbolically; ``max``,
``min`` and ``abs`` use the derivative of the active branch.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class CostError(ValueError):
    pass


# -- expression trees ----------------------------------------------------------

@dataclass(frozen=True)
class Num:
    v: float


@dataclass(frozen=True)
class Var:
    kind: str  # "y" or "a"
    t: int


@dataclass(frozen=True)
class Bin:
    op: str  # + - * /
    l: object
    r: object


@dataclass(frozen=True)
class Neg:
    u: object


@dataclass(frozen=True)
class Pow:
    u: object
    c: float


@dataclass(frozen=True)
class Fn:
    name: str  # max min abs
    args: tuple


@dataclass(frozen=True)
class Pick:
    """Derivative of max/min: ``douts[k]`` where ``k`` is the active argument."""

    name: str
    args: tuple
    douts: tuple


@dataclass(frozen=True)
class Sign:
    u: object


_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|([A-Za-z_]\w*)|(\S))")


def _tokenize(text: str) -> list[tuple[str, str]]:
    out = []
    pos = 0
    text = text.replace("−", "-").replace("**", "^")
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise CostError(f"cannot parse expression at position {pos}: {text[pos:]!r}")
        num, name, sym = m.groups()
        if num is not None:
            out.append(("num", num))
        elif name is not None:
            out.append(("name", name))
        elif sym is not None:
            out.append(("sym", sym))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.k = 0
        self.text = text

    def peek(self):
        return self.toks[self.k] if self.k < len(self.toks) else ("end", "")

    def take(self, sym=None):
        tok = self.peek()
        if sym is not None and tok != ("sym", sym):
            raise CostError(f"expected {sym!r} in {self.text!r}, found {tok[1]!r}")
        self.k += 1
        return tok

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise CostError(f"unexpected {self.peek()[1]!r} in {self.text!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek() in (("sym", "+"), ("sym", "-")):
            op = self.take()[1]
            node = Bin(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek() in (("sym", "*"), ("sym", "/")):
            op = self.take()[1]
            node = Bin(op, node, self.unary())
        return node

    def unary(self):
        if self.peek() == ("sym", "-"):
            self.take()
            return Neg(self.unary())
        if self.peek() == ("sym", "+"):
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == ("sym", "^"):
            self.take()
            expo = self.unary()
            c = _const_value(expo)
            if c is None:
                raise CostError("exponents must be constant")
            return Pow(base, c)
        return base

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "sym" and val == "(":
            node = self.expr()
            self.take(")")
            return node
        if kind == "name":
            m = re.fullmatch(r"([ya])(\d+)", val)
            if m:
                t = int(m.group(2))
                if t < 1:
                    raise CostError(f"time index must be >= 1 in {val!r}")
                return Var(m.group(1), t)
            if val in ("max", "min", "abs"):
                self.take("(")
                args = [self.expr()]
                while self.peek() == ("sym", ","):
                    self.take()
                    args.append(self.expr())
                self.take(")")
                if val == "abs" and len(args) != 1:
                    raise CostError("abs takes one argument")
                return Fn(val, tuple(args))
            raise CostError(f"unknown symbol {val!r}")
        raise CostError(f"unexpected {val!r} in {self.text!r}")


def parse_expression(text: str):
    return _Parser(text).parse()


def _const_value(node) -> float | None:
    if isinstance(node, Num):
        return node.v
    if isinstance(node, Neg):
        v = _const_value(node.u)
        return None if v is None else -v
    if isinstance(node, Bin):
        l, r = _const_value(node.l), _const_value(node.r)
        if l is None or r is None:
            return None
        return {"+": l + r, "-": l - r, "*": l * r, "/": l / r if r else math.nan}[node.op]
    if isinstance(node, Pow):
        u = _const_value(node.u)
        return None if u is None else u ** node.c
    return None


def evaluate(node, y: Array, a: Array | None):
    if isinstance(node, Num):
        return node.v
    if isinstance(node, Var):
        src = y if node.kind == "y" else a
        if src is None or node.t > src.shape[1]:
            raise CostError(f"{node.kind}{node.t} is not available here")
        return src[:, node.t - 1]
    if isinstance(node, Bin):
        l, r = evaluate(node.l, y, a), evaluate(node.r, y, a)
        if node.op == "+":
            return l + r
        if node.op == "-":
            return l - r
        if node.op == "*":
            return l * r
        return l / r
    if isinstance(node, Neg):
        return -evaluate(node.u, y, a)
    if isinstance(node, Pow):
        u = evaluate(node.u, y, a)
        if float(node.c).is_integer():
            return u ** int(node.c)
        return np.power(u, node.c)
    if isinstance(node, Fn):
        vals = [evaluate(u, y, a) for u in node.args]
        if node.name == "abs":
            return np.abs(vals[0])
        red = np.maximum if node.name == "max" else np.minimum
        out = vals[0]
        for v in vals[1:]:
            out = red(out, v)
        return out
    if isinstance(node, Pick):
        vals = np.broadcast_arrays(*[np.asarray(evaluate(u, y, a), dtype=float) for u in node.args])
        stack = np.stack(vals)
        k = np.argmax(stack, axis=0) if node.name == "max" else np.argmin(stack, axis=0)
        ders = np.stack(np.broadcast_arrays(*[np.asarray(evaluate(d, y, a), dtype=float) for d in node.douts], stack[0]))[:-1]
        return np.take_along_axis(ders, k[None], axis=0)[0]
    if isinstance(node, Sign):
        return np.sign(evaluate(node.u, y, a))
    raise TypeError(node)


def _add(l, r):
    if l == Num(0.0):
        return r
    if r == Num(0.0):
        return l
    return Bin("+", l, r)


def _mul(l, r):
    if l == Num(0.0) or r == Num(0.0):
        return Num(0.0)
    if l == Num(1.0):
        return r
    if r == Num(1.0):
        return l
    return Bin("*", l, r)


def differentiate(node, var: Var):
    """Symbolic partial derivative with light constant folding."""
    d = lambda u: differentiate(u, var)  # noqa: E731
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0) if node == var else Num(0.0)
    if isinstance(node, Neg):
        du = d(node.u)
        return Num(0.0) if du == Num(0.0) else Neg(du)
    if isinstance(node, Bin):
        dl, dr = d(node.l), d(node.r)
        if node.op == "+":
            return _add(dl, dr)
        if node.op == "-":
            return dl if dr == Num(0.0) else Bin("-", dl, dr)
        if node.op == "*":
            return _add(_mul(dl, node.r), _mul(node.l, dr))
        # quotient rule
        num = Bin("-", _mul(dl, node.r), _mul(node.l, dr)) if dr != Num(0.0) else _mul(dl, node.r)
        if num == Num(0.0):
            return Num(0.0)
        return Bin("/", num, Pow(node.r, 2.0))
    if isinstance(node, Pow):
        du = d(node.u)
        if du == Num(0.0) or node.c == 0:
            return Num(0.0)
        inner = Num(node.c) if node.c == 1 else _mul(Num(node.c), Pow(node.u, node.c - 1))
        return _mul(inner, du)
    if isinstance(node, Fn):
        if node.name == "abs":
            du = d(node.args[0])
            return Num(0.0) if du == Num(0.0) else _mul(Sign(node.args[0]), du)
        douts = tuple(d(u) for u in node.args)
        if all(x == Num(0.0) for x in douts):
            return Num(0.0)
        return Pick(node.name, node.args, douts)
    raise CostError(f"cannot differentiate {node!r}")


def variables(node) -> set[Var]:
    if isinstance(node, Var):
        return {node}
    if isinstance(node, (Bin,)):
        return variables(node.l) | variables(node.r)
    if isinstance(node, (Neg, Pow, Sign)):
        return variables(node.u)
    if isinstance(node, (Fn, Pick)):
        out: set[Var] = set()
        for u in node.args:
            out |= variables(u)
        return out
    return set()


def _signed_terms(node, sign=1.0):
    if isinstance(node, Bin) and node.op in "+-":
        yield from _signed_terms(node.l, sign)
        yield from _signed_terms(node.r, sign if node.op == "+" else -sign)
    elif isinstance(node, Neg):
        yield from _signed_terms(node.u, -sign)
    else:
        yield sign, node


# -- cost model ------------------------------------------------------------------

PartFn = Callable[[Array, Array], Array]


@dataclass(eq=False)
class CostModel:
    """Terminal cost with optional semi-separable parts and gradient.

    ``f(y, a)`` takes ``(n, N)`` arrays (``a`` is ``None`` for uncontrolled
    costs).  ``parts[t-1](y_prefix, a_t)`` takes ``y_prefix`` of shape
    ``(n, t)`` and controls ``a_t`` of shape ``(n,)``.  ``grad(y, a)``
    returns ``d f / d y_t`` as an ``(n, N)`` array.  The convexity flags are
    user assertions.
    """

    horizon: int
    f: Callable[[Array, Array | None], Array]
    parts: Sequence[PartFn] | None = None
    grad: Callable[[Array, Array | None], Array] | None = None
    controlled: bool = False
    convex_in_control: bool = False
    strongly_convex: bool = False
    lsc: bool = True
    name: str = "custom"
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.parts is None and not self.controlled:
            terminal = self.f
            zero: PartFn = lambda y, a: np.zeros(y.shape[0])  # noqa: E731
            self.parts = [zero] * (self.horizon - 1) + [lambda y, a: terminal(y, None)]
        if self.parts is not None and len(self.parts) != self.horizon:
            raise CostError("need one semi-separable part per period")

    @property
    def semi_separable(self) -> bool:
        return self.parts is not None

    def evaluate(self, y, a=None) -> Array:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if a is not None:
            a = np.broadcast_to(np.asarray(a, dtype=float), y.shape)
        elif self.controlled:
            raise CostError("controlled cost needs controls")
        return np.broadcast_to(np.asarray(self.f(y, a), dtype=float), (y.shape[0],)).copy()

    def part(self, t: int, y_prefix: Array, a_t) -> Array:
        n = y_prefix.shape[0]
        a_t = np.broadcast_to(np.asarray(0.0 if a_t is None else a_t, dtype=float), (n,))
        return np.broadcast_to(np.asarray(self.parts[t - 1](y_prefix, a_t), dtype=float), (n,)).copy()

    def gradient(self, y, a=None) -> Array:
        if self.grad is None:
            raise CostError(f"cost {self.name!r} has no derivatives")
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if a is not None:
            a = np.broadcast_to(np.asarray(a, dtype=float), y.shape)
        return np.broadcast_to(np.asarray(self.grad(y, a), dtype=float), y.shape).copy()

    def decomposition_error(self, seed: int = 0, n: int = 64, scale: float = 2.0) -> float:
        """Max ``|sum_t f_t - f|`` on random probes."""
        if self.parts is None:
            raise CostError("cost has no semi-separable parts")
        rng = np.random.default_rng(seed)
        y = rng.uniform(-scale, scale, (n, self.horizon))
        a = rng.uniform(-scale, scale, (n, self.horizon)) if self.controlled else None
        total = sum(self.part(t, y[:, :t], None if a is None else a[:, t - 1]) for t in range(1, self.horizon + 1))
        return float(np.max(np.abs(total - self.evaluate(y, a))))


def from_expression(text: str, horizon: int, convex_in_control: bool = False,
                    strongly_convex: bool = False) -> CostModel:
    """Cost model from an expression over ``y1..yN`` and ``a1..aN``."""
    tree = parse_expression(text)
    used = variables(tree)
    for v in used:
        if v.t > horizon:
            raise CostError(f"{v.kind}{v.t} exceeds horizon {horizon}")
    controlled = any(v.kind == "a" for v in used)

    def f(y, a):
        return evaluate(tree, y, a)

    dtrees = [differentiate(tree, Var("y", t)) for t in range(1, horizon + 1)]

    def grad(y, a):
        cols = [np.broadcast_to(np.asarray(evaluate(d, y, a), dtype=float), (y.shape[0],)) for d in dtrees]
        return np.stack(cols, axis=1)

    # semi-separable split: every additive term goes to the period of its control,
    # or to its last observed period when it has none
    groups: dict[int, list] = {}
    ok = True
    for sign, term in _signed_terms(tree):
        vs = variables(term)
        ctrl = {v.t for v in vs if v.kind == "a"}
        obs = {v.t for v in vs if v.kind == "y"}
        if len(ctrl) > 1:
            ok = False
            break
        t = next(iter(ctrl)) if ctrl else max(obs, default=1)
        if obs and max(obs) > t:
            ok = False
            break
        groups.setdefault(t, []).append(term if sign > 0 else Neg(term))
    parts = None
    if ok:
        parts = []
        for t in range(1, horizon + 1):
            terms = groups.get(t, [])
            node = terms[0] if terms else Num(0.0)
            for extra in terms[1:]:
                node = Bin("+", node, extra)

            def part(y_prefix, a_t, node=node, t=t):
                a = np.zeros((y_prefix.shape[0], t))
                a[:, t - 1] = a_t
                return np.broadcast_to(np.asarray(evaluate(node, y_prefix, a), dtype=float), (y_prefix.shape[0],))

            parts.append(part)
    return CostModel(horizon, f, parts, grad, controlled, convex_in_control, strongly_convex,
                     name=text, spec={"expression": text})


def quadratic_tracking(horizon: int, weights: Sequence[float] | None = None) -> CostModel:
    """``sum_t w_t (y_t - a_t)^2``: strongly convex in the controls."""
    w = np.ones(horizon) if weights is None else np.asarray(weights, dtype=float)

    def f(y, a):
        return ((y - a) ** 2) @ w

    def part_t(t):
        return lambda yp, at: w[t - 1] * (yp[:, t - 1] - at) ** 2

    def grad(y, a):
        return 2 * w * (y - a)

    return CostModel(horizon, f, [part_t(t) for t in range(1, horizon + 1)], grad, True, True, True,
                     name="quadratic", spec={"builtin": "quadratic", "weights": w.tolist()})


def call_payoff(horizon: int, strike: float) -> CostModel:
    """``max(y_N - strike, 0)``."""

    def f(y, a):
        return np.maximum(y[:, -1] - strike, 0.0)

    def grad(y, a):
        g = np.zeros_like(y)
        g[:, -1] = (y[:, -1] > strike).astype(float)
        return g

    return CostModel(horizon, f, None, grad, name=f"call:{strike:g}", spec={"builtin": "call", "strike": strike})


def linear(coeffs: Sequence[float]) -> CostModel:
    """``sum_t c_t y_t``."""
    c = np.asarray(coeffs, dtype=float)

    def f(y, a):
        return y @ c

    def part_t(t):
        return lambda yp, at: c[t - 1] * yp[:, t - 1]

    return CostModel(len(c), f, [part_t(t) for t in range(1, len(c) + 1)], lambda y, a: np.broadcast_to(c, y.shape),
                     name="linear", spec={"builtin": "linear", "coeffs": c.tolist()})


def digital_payoff(horizon: int, strike: float) -> CostModel:
    """``1{y_N > strike}``; discontinuous, so no derivatives are provided."""

    def f(y, a):
        return (y[:, -1] > strike).astype(float)

    return CostModel(horizon, f, None, None, name=f"digital:{strike:g}", spec={"builtin": "digital", "strike": strike})


BUILTINS = {
    "quadratic": lambda N, arg: quadratic_tracking(N),
    "call": lambda N, arg: call_payoff(N, float(arg if arg is not None else 1.0)),
    "digital": lambda N, arg: digital_payoff(N, float(arg if arg is not None else 1.0)),
    "linear": lambda N, arg: linear([1.0] * N if arg is None else [float(x) for x in str(arg).split(",")]),
}


def builtin(spec: str, horizon: int) -> CostModel:
    """``name`` or ``name:arg``, e.g. ``quadratic``, ``call:1.0``, ``linear:1,1``."""
    name, _, arg = spec.partition(":")
    if name not in BUILTINS:
        raise CostError(f"unknown builtin {name!r}; choose from {sorted(BUILTINS)}")
    return BUILTINS[name](horizon, arg or None)
