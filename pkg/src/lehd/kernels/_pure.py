"""Pure numpy fallback for the compiled kernels (same results, bit for bit)."""
import numpy as np


def held_karp(D, start, end):
    D = np.asarray(D, dtype=np.float64)
    m = D.shape[0]
    F = [v for v in range(m) if v != start and v != end]
    k = len(F)
    if k == 0:
        if start == end:
            return 0.0, [start]
        return float(D[start, end]), [start, end]
    Fa = np.asarray(F)
    DF = D[np.ix_(Fa, Fa)]
    nstates = 1 << k
    dp = np.full((nstates, k), np.inf)
    par = np.full((nstates, k), -1, dtype=np.int64)
    for j in range(k):
        dp[1 << j, j] = D[start, F[j]]
    masks = np.arange(nstates)
    popcount = np.array([bin(x).count("1") for x in range(nstates)])
    for s in range(2, k + 1):
        layer = masks[popcount == s]
        for j in range(k):
            sel = layer[(layer >> j) & 1 == 1]
            prev = sel ^ (1 << j)
            cand = dp[prev] + DF[:, j][None, :]
            p = np.argmin(cand, axis=1)
            dp[sel, j] = cand[np.arange(len(sel)), p]
            par[sel, j] = p
    full = nstates - 1
    final = dp[full] + D[Fa, end]
    best_j = int(np.argmin(final))
    best = float(final[best_j])
    order = []
    mask, j = full, best_j
    while j >= 0:
        order.append(F[j])
        p = int(par[mask, j])
        mask ^= 1 << j
        j = p
    order.append(start)
    order.reverse()
    if start != end:
        order.append(end)
    return best, order


def nearest_neighbor_tour(D, start):
    D = np.asarray(D, dtype=np.float64)
    m = D.shape[0]
    used = np.zeros(m, dtype=bool)
    used[start] = True
    order = [start]
    cur = start
    for _ in range(m - 1):
        row = np.where(used, np.inf, D[cur])
        cur = int(np.argmin(row))
        used[cur] = True
        order.append(cur)
    return order


def closed_length(D, order):
    order = np.asarray(order)
    total = 0.0
    for i in range(len(order) - 1):
        total += D[order[i], order[i + 1]]
    if len(order) > 1:
        total += D[order[-1], order[0]]
    return float(total)
