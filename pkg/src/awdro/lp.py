"""Dense revised simplex for small equality-form linear programs.

    minimize c @ x  subject to  A @ x = b,  x >= 0

The problems met in this package have at most a few dozen rows, so an
explicit basis inverse is kept, updated by a rank-one pivot and
refactorized every ``REFACTOR`` pivots.  Pricing is Dantzig's rule;
after a degenerate pivot it switches to Bland's smallest-index rule until
the objective moves again, which rules out cycling.  Ties in the ratio test
go to the smallest variable index, so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-11
REFACTOR = 32


class LPError(RuntimeError):
    pass


class Infeasible(LPError):
    pass


class Unbounded(LPError):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    value: float
    duals: np.ndarray  # one per row of the (possibly row-reduced) system, see ``rows``
    basis: np.ndarray
    rows: np.ndarray  # indices of the original rows kept after redundancy removal
    iterations: int


def _phase2(c, A, b, basis, max_iter, tol):
    m, n = A.shape
    basis = np.array(basis, dtype=int)
    scale = 1.0 + float(np.max(np.abs(c))) if c.size else 1.0
    opt_tol = 1e-13 * scale
    bland = False
    it = 0
    Binv = np.linalg.inv(A[:, basis])
    fresh = 0
    while True:
        xb = Binv @ b
        y = c[basis] @ Binv
        d = c - y @ A
        d[basis] = 0.0
        if bland:
            cand = np.flatnonzero(d < -opt_tol)
            if cand.size == 0:
                break
            q = int(cand[0])
        else:
            q = int(np.argmin(d))
            if d[q] >= -opt_tol:
                break
        u = Binv @ A[:, q]
        pos = u > PIVOT_TOL
        if not np.any(pos):
            raise Unbounded("objective unbounded below")
        ratios = np.full(m, np.inf)
        ratios[pos] = np.maximum(xb[pos], 0.0) / u[pos]
        theta = ratios.min()
        ties = np.flatnonzero(ratios <= theta + 1e-14 * (1 + theta))
        r = int(ties[np.argmin(basis[ties])])
        bland = theta <= tol
        basis[r] = q
        it += 1
        if it > max_iter:
            raise LPError("simplex iteration limit reached")
        fresh += 1
        if fresh >= REFACTOR:
            Binv = np.linalg.inv(A[:, basis])
            fresh = 0
        else:
            pr = Binv[r] / u[r]
            Binv -= np.outer(u, pr)
            Binv[r] = pr
    if fresh:
        # final solution from a fresh factorization
        B = A[:, basis]
        xb = np.linalg.solve(B, b)
        y = np.linalg.solve(B.T, c[basis])
    # basic values at rounding level are zeros of a degenerate vertex
    zero_tol = 1e-14 * (1.0 + float(np.max(np.abs(b)))) if b.size else 0.0
    x = np.zeros(n)
    x[basis] = np.where(xb > zero_tol, xb, 0.0)
    return x, y, basis, it


def solve_lp(c, A, b, basis=None, max_iter: int = 50_000, tol: float = PIVOT_TOL) -> LPResult:
    """Solve the equality-form LP.  ``basis`` may name a known feasible basis."""
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    rows = np.arange(m)
    if basis is not None:
        x, y, basis, it = _phase2(c, A, b, basis, max_iter, tol)
        return LPResult(x, float(c @ x), y, basis, rows, it)

    # phase 1 with one artificial per row
    sign = np.where(b < 0, -1.0, 1.0)
    A1 = np.hstack([A * sign[:, None], np.eye(m)])
    b1 = b * sign
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    x1, _, basis1, it1 = _phase2(c1, A1, b1, np.arange(n, n + m), max_iter, tol)
    infeas = x1[n:].sum()
    if infeas > 1e-9 * (1 + np.abs(b1).sum()):
        raise Infeasible(f"infeasible (phase-1 residual {infeas:.3g})")

    # drive artificials out of the basis; rows where that is impossible are redundant
    keep = np.ones(m, dtype=bool)
    basis1 = basis1.copy()
    for r in range(m):
        if basis1[r] < n:
            continue
        B = A1[:, basis1]
        row = np.linalg.solve(B.T, np.eye(m)[r])  # r-th row of B^{-1}
        alpha = row @ A1[:, :n]
        alpha[basis1[basis1 < n]] = 0.0
        j = np.flatnonzero(np.abs(alpha) > 1e-9)
        if j.size:
            basis1[r] = int(j[0])
        else:
            keep[r] = False
    rows = np.flatnonzero(keep)
    basis2 = basis1[keep]
    A2, b2 = A[rows], b[rows]
    x, y, basis2, it2 = _phase2(c, A2, b2, basis2, max_iter, tol)
    return LPResult(x, float(c @ x), y, basis2, rows, it1 + it2)
