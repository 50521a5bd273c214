"""``awdro`` command line.

Exit codes: 0 success, 1 verification failure, 2 input error,
3 constraint violation (e.g. a non-martingale tree with ``--martingale``),
4 missing capability (e.g. a cost without derivatives for ``sens``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .costs import BUILTINS, CostError, CostModel, builtin, from_expression
from .dro import ControlGrid, DroError, NotMartingale, minimax_gap, solve_controlled, solve_martingale, solve_uncontrolled
from .measures import AdaptedMeasure, TreeError, dump_tree, load_tree, random_martingale_tree, random_tree
from .oracle import BudgetExceeded, property_suite
from .sensitivity import DEFAULT_SCHEDULE, SensitivityError, empirical_slope, upsilon, upsilon_martingale

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_CONSTRAINT, EXIT_CAPABILITY = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Everything that determines a run's output (the thread count does not)."""

    subcommand: str
    trees: list[str] = field(default_factory=list)
    cost: str | None = None
    p: float | None = None
    delta: float | None = None
    schedule: list[float] | None = None
    k_lo: float = -1.0
    k_hi: float = 1.0
    k_n: int = 129
    m: int = 64
    martingale: bool = False
    output: str | None = None
    seed: int = 0
    format: str = "json"

    def validate(self):
        if self.delta is not None and self.delta < 0:
            raise CliError("delta must be >= 0", EXIT_INPUT)
        if self.p is not None and self.p < 1:
            raise CliError("p must be >= 1", EXIT_INPUT)
        if self.m < 1:
            raise CliError("m must be >= 1", EXIT_INPUT)
        if self.k_n < 1 or self.k_hi < self.k_lo:
            raise CliError("control grid needs k_lo <= k_hi and k_n >= 1", EXIT_INPUT)


# -- helpers ---------------------------------------------------------------------------------

def _load(path: str, p: float | None) -> AdaptedMeasure:
    try:
        m = load_tree(Path(path))
    except FileNotFoundError:
        raise CliError(f"{path}: no such file", EXIT_INPUT) from None
    except TreeError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from None
    if p is not None and p != m.p:
        m = AdaptedMeasure(m.horizon, p, m.nodes)
    return m


def _cost(args, horizon: int) -> CostModel:
    text = args.cost
    try:
        if text.partition(":")[0] in BUILTINS:
            return builtin(text, horizon)
        return from_expression(text, horizon, convex_in_control=args.convex or args.strongly_convex,
                               strongly_convex=args.strongly_convex)
    except CostError as exc:
        raise CliError(f"cost: {exc}", EXIT_INPUT) from None


def _control_grid(cfg: RunConfig, args) -> ControlGrid:
    return ControlGrid(cfg.k_lo, cfg.k_hi, cfg.k_n, polish=False if args.no_polish else None)


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(cfg: RunConfig, doc: dict, csv_text: str | None = None):
    if cfg.format == "csv" and csv_text is not None:
        text = csv_text
    else:
        doc = dict(doc)
        doc["config"] = asdict(cfg)
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if cfg.output:
        Path(cfg.output).write_text(text)
    else:
        sys.stdout.write(text)


def _config(args) -> RunConfig:
    cfg = RunConfig(args.command)
    for name in ("trees", "cost", "p", "delta", "schedule", "k_lo", "k_hi", "k_n", "m", "martingale",
                 "output", "seed", "format"):
        if hasattr(args, name) and getattr(args, name) is not None:
            val = getattr(args, name)
            setattr(cfg, name, [val] if name == "trees" and isinstance(val, str) else val)
    cfg.validate()
    return cfg


# -- subcommands ---------------------------------------------------------------------------------

def cmd_dist(args) -> int:
    from .adapted_metrics import all_distances

    cfg = _config(args)
    mu, nu = (_load(t, cfg.p) for t in cfg.trees)
    try:
        res = all_distances(mu, nu, args.threads)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    doc = {k: r.value for k, r in res.items()}
    doc["p"] = mu.p
    if args.couplings:
        doc["couplings"] = {k: r.to_dict(with_coupling=True)["coupling"] for k, r in res.items()}
    _emit(cfg, doc, _csv(["metric", "value"], [[k, repr(r.value)] for k, r in res.items()]))
    return EXIT_OK


def cmd_dro(args) -> int:
    cfg = _config(args)
    if cfg.delta is None:
        raise CliError("--delta is required", EXIT_INPUT)
    mu = _load(cfg.trees[0], cfg.p)
    cost = _cost(args, mu.horizon)
    K = _control_grid(cfg, args) if cost.controlled else None
    try:
        if cfg.martingale:
            sol = solve_martingale(mu, cost, K, cfg.delta, m=cfg.m, threads=args.threads)
        elif cost.controlled:
            sol = solve_controlled(mu, cost, K, cfg.delta, m=cfg.m, threads=args.threads)
        else:
            sol = solve_uncontrolled(mu, cost, cfg.delta, m=cfg.m, threads=args.threads)
    except NotMartingale as exc:
        raise CliError(str(exc), EXIT_CONSTRAINT) from None
    except DroError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None
    doc = sol.to_dict()
    if args.gap and cost.controlled:
        doc["minimax_gap"] = minimax_gap(sol)
        doc["sup_inf_bound"] = sol.diagnostics.get("sup_inf_bound")
    rows = [[r["node"], r["depth"], " ".join(map(repr, r["x"])), " ".join(map(repr, r["y"])), r["control"]]
            for r in doc["policy"]]
    _emit(cfg, doc, _csv(["node", "depth", "x", "y", "control"], rows))
    return EXIT_OK


def cmd_sens(args) -> int:
    cfg = _config(args)
    mu = _load(cfg.trees[0], cfg.p)
    cost = _cost(args, mu.horizon)
    if cost.grad is None:
        raise CliError(f"cost {cost.name!r} has no derivatives", EXIT_CAPABILITY)
    K = _control_grid(cfg, args) if cost.controlled else None
    schedule = cfg.schedule if cfg.schedule is not None else list(DEFAULT_SCHEDULE)
    cfg.schedule = schedule
    try:
        rep = upsilon_martingale(mu, cost, K) if cfg.martingale else upsilon(mu, cost, K)
        if schedule:
            rep = empirical_slope(mu, cost, K, schedule, cfg.martingale, cfg.m, report=rep)
    except SensitivityError as exc:
        code = EXIT_CONSTRAINT if "martingale" in str(exc) else EXIT_CAPABILITY
        raise CliError(str(exc), code) from None
    d = rep.to_dict()
    doc = {"upsilon": d["value"], "kind": d["kind"], "per_period": d["contributions"], "slopes": d["slopes"],
           "floor_slopes": d["floor_slopes"], "controls": d["controls"], "warnings": d["warnings"]}
    if cfg.martingale:
        doc["lambda_stars"] = d["lambdas"]
    if d["directions"]:
        doc["directions"] = d["directions"]
    floors = dict(rep.floor_slopes)
    rows = [[repr(dl), repr(v), repr(s), repr(floors[dl]) if dl in floors else ""] for dl, v, s in rep.slopes]
    csv_text = _csv(["delta", "value", "slope", "floor_slope"], rows)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    _emit(cfg, doc, csv_text)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .reference import all_checks

    cfg = _config(args)
    rows = all_checks(args.threads, cfg.seed)
    suite = property_suite(cfg.seed, args.count, inject_bug=args.inject_bug, dump_dir=args.dump_dir,
                           threads=args.threads)
    width = max(len(r["name"]) for r in rows)
    lines = [f"{'check':<{width}}  {'expected':>22}  {'actual':>22}  result"]
    for r in rows:
        mark = "pass" if r["passed"] else "FAIL"
        lines.append(f"{r['name']:<{width}}  {r['expected']:>22.15g}  {r['actual']:>22.15g}  {mark}")
    for name, st in sorted(suite.by_property.items()):
        mark = "pass" if st["failures"] == 0 else "FAIL"
        lines.append(f"{'property ' + name:<{width}}  {st['checks']:>22d}  {st['failures']:>22d}  {mark}")
    ok = all(r["passed"] for r in rows) and suite.passed
    lines.append("verify: " + ("PASS" if ok else "FAIL"))
    if not suite.passed and args.dump_dir:
        lines.append(f"counterexamples written to {args.dump_dir}")
    sys.stderr.write("\n".join(lines) + "\n")
    doc = {"passed": ok, "checks": rows, "properties": suite.to_dict()}
    csv_rows = [[r["name"], repr(r["expected"]), repr(r["actual"]), r["tol"], r["passed"]] for r in rows]
    _emit(cfg, doc, _csv(["name", "expected", "actual", "tol", "passed"], csv_rows))
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_gen(args) -> int:
    cfg = _config(args)
    branching = tuple(args.branching) if len(args.branching) == 2 else args.branching[0]
    p = cfg.p if cfg.p is not None else 2.0
    if args.martingale:
        m = random_martingale_tree(cfg.seed, args.horizon, branching, p=p)
    else:
        m = random_tree(cfg.seed, args.horizon, branching, p=p)
    text = dump_tree(m)
    if cfg.output:
        Path(cfg.output).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="awdro", description="Adapted Wasserstein distances and robust control on scenario trees")
    ap.add_argument("--version", action="version", version=f"awdro {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: $AWDRO_THREADS or 1)")
    common.add_argument("--format", choices=["json", "csv"], default="json")
    common.add_argument("--output", "-o", default=None, help="write the report here instead of stdout")
    common.add_argument("--p", type=float, default=None, help="override the order p stored in the tree files")
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dist", parents=[common], help="W_p, AW_p and AW_p^inf between two trees")
    d.add_argument("trees", nargs=2)
    d.add_argument("--couplings", action="store_true", help="include the optimal couplings")
    d.set_defaults(func=cmd_dist)

    def cost_flags(sp):
        sp.add_argument("--cost", required=True, help=f"expression in y1..yN, a1..aN or a builtin {sorted(BUILTINS)}")
        sp.add_argument("--convex", action="store_true", help="assert convexity in the controls")
        sp.add_argument("--strongly-convex", action="store_true", help="assert strong convexity in the controls")
        sp.add_argument("--martingale", action="store_true")
        sp.add_argument("--k-lo", type=float, default=-1.0)
        sp.add_argument("--k-hi", type=float, default=1.0)
        sp.add_argument("--k-n", type=int, default=129, help="control grid size")
        sp.add_argument("--no-polish", action="store_true", help="grid search only")
        sp.add_argument("--m", type=int, default=64, help="perturbation grid points per side of each atom")

    r = sub.add_parser("dro", parents=[common], help="robust value, policy and adversary")
    r.add_argument("trees", nargs=1)
    cost_flags(r)
    r.add_argument("--delta", type=float, required=True)
    r.add_argument("--gap", action="store_true", help="also report the minimax gap certificate")
    r.set_defaults(func=cmd_dro)

    s = sub.add_parser("sens", parents=[common], help="first-order sensitivity and a delta sweep")
    s.add_argument("trees", nargs=1)
    cost_flags(s)
    s.add_argument("--schedule", type=float, nargs="*", default=None, help="decreasing deltas for the slope sweep")
    s.add_argument("--csv", default=None, help="also write the (delta, slope) table here")
    s.set_defaults(func=cmd_sens)

    v = sub.add_parser("verify", parents=[common], help="reference checks and the property suite")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--count", type=int, default=200)
    v.add_argument("--inject-bug", action="store_true", help="negative control: perturb couplings")
    v.add_argument("--dump-dir", default=None, help="where to write counterexample files")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gen", parents=[common], help="random tree in the input format")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--horizon", type=int, default=2)
    g.add_argument("--branching", type=int, nargs="+", default=[1, 3], help="fixed count or lo hi")
    g.add_argument("--martingale", action="store_true")
    g.set_defaults(func=cmd_gen)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(f"awdro {args.command}: {exc}\n")
        return exc.code
    except BudgetExceeded as exc:
        sys.stderr.write(f"awdro {args.command}: {exc}\n")
        return EXIT_CAPABILITY
    except (TreeError, CostError, ValueError) as exc:
        sys.stderr.write(f"awdro {args.command}: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
