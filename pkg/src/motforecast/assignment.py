"""Gated linear assignment.

Entries at or above the gate are forbidden. They are replaced by a finite
sentinel large enough that the solver first maximizes the number of admissible
pairs and then minimizes their total cost; sentinel pairs are dropped
afterwards.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

BRUTEFORCE_LIMIT = 8


@dataclass
class AssignmentResult:
    matches: list[tuple[int, int]] = field(default_factory=list)
    unmatched_rows: list[int] = field(default_factory=list)
    unmatched_cols: list[int] = field(default_factory=list)

    def total_cost(self, cost) -> float:
        cost = np.asarray(cost, dtype=np.float64)
        return float(sum(cost[r, c] for r, c in sorted(self.matches)))


def _check(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        if cost.size == 0:
            return cost.reshape(0, 0)
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("NaN in cost matrix (upstream numeric fault)")
    return cost


def _gated(cost: np.ndarray, gate: float) -> tuple[np.ndarray, np.ndarray]:
    allowed = cost < gate
    if not allowed.any():
        return np.ones_like(cost), allowed
    vals = cost[allowed]
    hi, lo = float(vals.max()), min(float(vals.min()), 0.0)
    # one forbidden pair must outweigh any spread of admissible totals
    sentinel = hi + (min(cost.shape) + 1) * (hi - lo) + 1.0
    return np.where(allowed, cost, sentinel), allowed


def _finish(pairs, allowed: np.ndarray) -> AssignmentResult:
    n_rows, n_cols = allowed.shape
    matches = sorted((r, c) for r, c in pairs if allowed[r, c])
    rows = {r for r, _ in matches}
    cols = {c for _, c in matches}
    return AssignmentResult(
        matches=matches,
        unmatched_rows=[r for r in range(n_rows) if r not in rows],
        unmatched_cols=[c for c in range(n_cols) if c not in cols],
    )


def _hungarian_square(a: np.ndarray) -> np.ndarray:
    """Shortest augmenting path with row/column potentials, O(n^3).

    Returns ``col_of_row``.
    """
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.int64)  # 1-based, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, math.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], math.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[row_of_col[j] - 1] = j - 1
    return col_of_row


def solve(cost, gate: float = math.inf) -> AssignmentResult:
    """Minimum-cost assignment using only entries strictly below ``gate``."""
    cost = _check(cost)
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return AssignmentResult([], list(range(n_rows)), list(range(n_cols)))
    work, allowed = _gated(cost, gate)
    n = max(n_rows, n_cols)
    square = np.zeros((n, n))
    square[:n_rows, :n_cols] = work
    col_of_row = _hungarian_square(square)
    pairs = [(r, int(col_of_row[r])) for r in range(n_rows) if col_of_row[r] < n_cols]
    return _finish(pairs, allowed)


def solve_bruteforce(cost, gate: float = math.inf) -> AssignmentResult:
    """Exhaustive reference solver; same objective as :func:`solve`."""
    cost = _check(cost)
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return AssignmentResult([], list(range(n_rows)), list(range(n_cols)))
    if min(n_rows, n_cols) > BRUTEFORCE_LIMIT:
        raise ValueError(f"brute force limited to min(rows, cols) <= {BRUTEFORCE_LIMIT}")
    allowed = cost < gate
    transpose = n_rows > n_cols
    c = cost.T if transpose else cost
    ok = allowed.T if transpose else allowed
    best_key, best = None, None
    for perm in itertools.permutations(range(c.shape[1]), c.shape[0]):
        n_ok = 0
        total = 0.0
        for r, col in enumerate(perm):
            if ok[r, col]:
                n_ok += 1
                total += c[r, col]
        key = (-n_ok, total)
        if best_key is None or key < best_key:
            best_key, best = key, perm
    pairs = [(col, r) if transpose else (r, col) for r, col in enumerate(best)]
    return _finish(pairs, allowed)
