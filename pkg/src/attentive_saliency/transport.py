"""Exact optimal transport between two discrete distributions.

Solved as a min-cost flow on the complete bipartite graph from surplus cells
to deficit cells, by successive shortest augmenting paths with Dijkstra on
reduced costs (node potentials keep every residual arc non-negative).
"""

from __future__ import annotations

import numpy as np


def _dijkstra(cost, pot_s, pot_t, flow, supply, demand, tol):
    """Shortest path from any source with supply to any sink with demand.

    Returns (dist_s, dist_t, target, parent_s, parent_t) where parent_t[j] is
    the source feeding sink j on the tree and parent_s[i] is the sink that
    reached source i through a reverse arc (-1 for roots).
    """
    n, m = cost.shape
    inf = np.inf
    dist_s = np.where(supply > tol, 0.0, inf)
    dist_t = np.full(m, inf)
    parent_s = np.full(n, -1)
    parent_t = np.full(m, -1)
    done_s = np.zeros(n, dtype=bool)
    done_t = np.zeros(m, dtype=bool)
    while True:
        ds = np.where(done_s, inf, dist_s)
        dt = np.where(done_t, inf, dist_t)
        i = int(np.argmin(ds))
        j = int(np.argmin(dt))
        if ds[i] == inf and dt[j] == inf:
            raise RuntimeError("transport problem is infeasible")
        if ds[i] <= dt[j]:
            done_s[i] = True
            # forward arcs i -> every sink, reduced cost c + p_i - p_j
            cand = dist_s[i] + cost[i] + pot_s[i] - pot_t
            better = (cand < dist_t) & ~done_t
            dist_t[better] = cand[better]
            parent_t[better] = i
        else:
            done_t[j] = True
            if demand[j] > tol:
                return dist_s, dist_t, j, parent_s, parent_t
            # reverse arcs j -> i where flow is positive, reduced cost -c + p_j - p_i
            carry = flow[:, j] > tol
            cand = dist_t[j] - cost[:, j] + pot_t[j] - pot_s
            cand = np.maximum(cand, dist_t[j])  # clamp round-off below zero
            better = carry & (cand < dist_s) & ~done_s
            dist_s[better] = cand[better]
            parent_s[better] = j


def min_cost_transport(supply, demand, cost, tol: float = 1e-15):
    """Minimum of sum(F * cost) over F >= 0 with row sums ``supply`` and column sums ``demand``.

    Returns ``(total_cost, flow)``.  The totals of ``supply`` and ``demand``
    must agree to within round-off.
    """
    supply = np.array(supply, dtype=np.float64)
    demand = np.array(demand, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if supply.shape != (n,) or demand.shape != (m,):
        raise ValueError("supply/demand do not match the cost matrix")
    if np.any(supply < 0) or np.any(demand < 0):
        raise ValueError("masses must be non-negative")
    scale = max(supply.sum(), demand.sum())
    if scale <= 0:
        raise ValueError("transport needs positive total mass")
    # equalise totals exactly: round-off mismatch goes to the largest demand
    demand[np.argmax(demand)] += supply.sum() - demand.sum()
    demand = np.maximum(demand, 0.0)
    flow = np.zeros((n, m))
    pot_s = np.zeros(n)
    pot_t = cost.min(axis=0) if n else np.zeros(m)
    eps = tol * scale
    while supply.sum() > eps * max(n, 1):
        dist_s, dist_t, target, parent_s, parent_t = _dijkstra(
            cost, pot_s, pot_t, flow, supply, demand, eps
        )
        d = dist_t[target]
        pot_s += np.minimum(dist_s, d)
        pot_t += np.minimum(dist_t, d)
        # walk back from the target: forward arcs (i, j) gain flow, reverse
        # arcs (i, parent_s[i]) give some back
        forward, backward = [], []
        j = target
        while True:
            i = parent_t[j]
            forward.append((i, j))
            if parent_s[i] < 0:
                root = i
                break
            j = parent_s[i]
            backward.append((i, j))
        amount = min([supply[root], demand[target]] + [flow[i, j] for i, j in backward])
        for i, j in forward:
            flow[i, j] += amount
        for i, j in backward:
            flow[i, j] -= amount
        supply[root] -= amount
        demand[target] -= amount
    flow = np.maximum(flow, 0.0)
    return float(np.sum(flow * cost)), flow
