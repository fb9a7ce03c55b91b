# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the oracle kernels.  Must agree bit-for-bit with _pure."""
from libc.stdlib cimport malloc, free
from libc.math cimport INFINITY


def held_karp(double[:, ::1] D, int start, int end):
    """Cheapest path start -> (every other node) -> end.

    ``start == end`` gives a closed tour.  Predecessor ties go to the lowest
    node index.  Returns ``(cost, order)`` where order starts with ``start`` and,
    for a path, ends with ``end`` (a tour does not repeat ``start``).
    """
    cdef int m = D.shape[0]
    cdef int k, i, j, p, best_j
    cdef Py_ssize_t mask, prev, full, nstates
    cdef double c, best, cand
    free_nodes = [v for v in range(m) if v != start and v != end]
    k = len(free_nodes)
    if k == 0:
        if start == end:
            return 0.0, [start]
        return D[start, end], [start, end]
    cdef int *F = <int *> malloc(k * sizeof(int))
    for i in range(k):
        F[i] = free_nodes[i]
    nstates = (<Py_ssize_t> 1) << k
    cdef double *dp = <double *> malloc(nstates * k * sizeof(double))
    cdef signed char *par = <signed char *> malloc(nstates * k * sizeof(signed char))
    if dp == NULL or par == NULL or F == NULL:
        free(dp); free(par); free(F)
        raise MemoryError()
    try:
        for mask in range(nstates * k):
            dp[mask] = INFINITY
            par[mask] = -1
        for j in range(k):
            dp[((<Py_ssize_t> 1) << j) * k + j] = D[start, F[j]]
        for mask in range(1, nstates):
            for j in range(k):
                if not (mask >> j) & 1:
                    continue
                prev = mask ^ ((<Py_ssize_t> 1) << j)
                if prev == 0:
                    continue
                best = INFINITY
                p = -1
                for i in range(k):
                    if not (prev >> i) & 1:
                        continue
                    cand = dp[prev * k + i] + D[F[i], F[j]]
                    if cand < best:
                        best = cand
                        p = i
                dp[mask * k + j] = best
                par[mask * k + j] = p
        full = nstates - 1
        best = INFINITY
        best_j = -1
        for j in range(k):
            cand = dp[full * k + j] + D[F[j], end]
            if cand < best:
                best = cand
                best_j = j
        order = []
        mask = full
        j = best_j
        while j >= 0:
            order.append(F[j])
            p = par[mask * k + j]
            mask = mask ^ ((<Py_ssize_t> 1) << j)
            j = p
        order.append(start)
        order.reverse()
        if start != end:
            order.append(end)
        return best, order
    finally:
        free(dp)
        free(par)
        free(F)


def nearest_neighbor_tour(double[:, ::1] D, int start):
    cdef int m = D.shape[0]
    cdef int cur = start, step, v, best_v
    cdef double best
    cdef char *used = <char *> malloc(m)
    for v in range(m):
        used[v] = 0
    used[start] = 1
    order = [start]
    try:
        for step in range(m - 1):
            best = INFINITY
            best_v = -1
            for v in range(m):
                if not used[v] and D[cur, v] < best:
                    best = D[cur, v]
                    best_v = v
            used[best_v] = 1
            order.append(best_v)
            cur = best_v
        return order
    finally:
        free(used)


def closed_length(double[:, ::1] D, long[::1] order):
    cdef Py_ssize_t i, m = order.shape[0]
    cdef double total = 0.0
    for i in range(m - 1):
        total += D[order[i], order[i + 1]]
    if m > 1:
        total += D[order[m - 1], order[0]]
    return total
