"""Minimum-cost bipartite assignment (Hungarian method with potentials)."""
from __future__ import annotations

import math

import numpy as np

# relative slack under which two total costs count as a tie
TIE_RTOL = 1e-12


def _solve(a: list[list[float]]) -> tuple[float, list[int]]:
    """Optimal assignment of each row of an n x m (n <= m) cost table to a distinct column."""
    n = len(a)
    if n == 0:
        return 0.0, []
    m = len(a[0])
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    owner = [0] * (m + 1)  # column -> row (1-based), column 0 is virtual
    way = [0] * (m + 1)
    for row in range(1, n + 1):
        owner[0] = row
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            costs = a[i0 - 1]
            ui = u[i0]
            delta, j1 = inf, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = costs[j - 1] - ui - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assign = [-1] * n
    for j in range(1, m + 1):
        if owner[j]:
            assign[owner[j] - 1] = j - 1
    return sum(a[r][assign[r]] for r in range(n)), assign


def hungarian_match(cost) -> np.ndarray:
    """Assign every ground-truth column of an (N_pred, N_gt) cost matrix to a distinct prediction.

    Returns ``assign`` of length N_gt with ``assign[g]`` the chosen prediction.
    Among optimal assignments the lexicographically smallest ``assign`` is
    returned, i.e. ties go to the lowest prediction index, earliest gt first.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_gt == 0:
        return np.zeros(0, dtype=np.int64)
    if n_gt > n_pred:
        raise ValueError(f"more ground truths ({n_gt}) than predictions ({n_pred})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")

    table = cost.T.tolist()  # rows = ground truths
    best_total, best = _solve(table)
    slack = TIE_RTOL * max(1.0, abs(best_total))

    # walk the gts in order and move each to the smallest prediction that still
    # admits an optimal completion
    for g in range(n_gt):
        prefix = best[:g]
        prefix_cost = sum(table[k][prefix[k]] for k in range(g))
        taken = set(prefix)
        for p in range(best[g]):
            if p in taken:
                continue
            free = [q for q in range(n_pred) if q not in taken and q != p]
            # row minima bound the completion cost from below
            bound = sum(min(table[r][q] for q in free) for r in range(g + 1, n_gt))
            if prefix_cost + table[g][p] + bound > best_total + slack:
                continue
            rest = [[table[r][q] for q in free] for r in range(g + 1, n_gt)]
            rest_total, rest_assign = _solve(rest)
            if prefix_cost + table[g][p] + rest_total <= best_total + slack:
                best = prefix + [p] + [free[q] for q in rest_assign]
                break
    return np.asarray(best, dtype=np.int64)


def assignment_cost(cost, assign) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[p, g] for g, p in enumerate(assign)))
