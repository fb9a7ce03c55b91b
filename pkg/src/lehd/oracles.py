"""Exact and heuristic reference solvers for small instances.

Held-Karp covers TSP (n <= 16) and fixed-endpoint Hamiltonian paths; CVRP
with up to 8 customers is solved exactly by a set-partition DP over
capacity-feasible customer subsets, each subset costed with Held-Karp.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .routing import (CvrpInstance, CvrpSolution, Tour, TspInstance,
                      distance_matrix, routes_to_flags)

MAX_HELD_KARP = 16
MAX_EXACT_CVRP = 8

# Mean nearest-neighbor gap (percent) against Held-Karp over 1000 uniform
# TSP9 instances, seeds 0..999, start node 0.  Recomputed in the test suite.
NN_BASELINE_GAP_TSP9 = 9.378032


class TooLarge(ValueError):
    pass


def _canonical_cycle(order: list[int]) -> list[int]:
    # start at the smallest node, then walk toward the smaller neighbour
    i = order.index(min(order))
    order = order[i:] + order[:i]
    if len(order) > 2 and order[-1] < order[1]:
        order = [order[0]] + order[:0:-1]
    return order


def held_karp_tsp(instance: TspInstance) -> tuple[Tour, float]:
    """Optimal closed tour.  Returned tour starts at node 0 in canonical direction."""
    n = instance.n
    if n > MAX_HELD_KARP:
        raise TooLarge(f"held_karp_tsp: n={n} exceeds {MAX_HELD_KARP}; use a heuristic "
                       "(nearest_neighbor or the model) instead")
    D = distance_matrix(instance.coords)
    cost, order = kernels.held_karp(D, 0, 0)
    return Tour(_canonical_cycle(order)), cost


def held_karp_path(coords: np.ndarray, nodes: Sequence[int], start: int, end: int) -> tuple[list[int], float]:
    """Shortest Hamiltonian path over ``nodes`` from ``start`` to ``end``.

    ``nodes`` index into ``coords``; the returned path uses the same ids.
    """
    nodes = list(nodes)
    if len(set(nodes)) != len(nodes):
        raise ValueError("held_karp_path: duplicate nodes")
    if not 2 <= len(nodes) <= MAX_HELD_KARP:
        if len(nodes) > MAX_HELD_KARP:
            raise TooLarge(f"held_karp_path: {len(nodes)} nodes exceeds {MAX_HELD_KARP}")
        raise ValueError("held_karp_path needs at least 2 nodes")
    if start not in nodes or end not in nodes:
        raise ValueError("start and end must belong to nodes")
    if start == end:
        raise ValueError("held_karp_path: start and end must differ")
    sub = np.asarray(coords, dtype=np.float64)[nodes]
    D = distance_matrix(sub)
    cost, local = kernels.held_karp(D, nodes.index(start), nodes.index(end))
    return [nodes[i] for i in local], cost


def exact_cvrp(instance: CvrpInstance) -> tuple[CvrpSolution, float]:
    n = instance.n
    if n > MAX_EXACT_CVRP:
        raise TooLarge(f"exact_cvrp: n={n} exceeds {MAX_EXACT_CVRP}")
    if n == 0:
        raise ValueError("exact_cvrp: no customers")
    D = distance_matrix(instance.coords)
    dem = instance.demands
    full = (1 << n) - 1
    load = np.zeros(full + 1, dtype=np.int64)
    for mask in range(1, full + 1):
        low = (mask & -mask).bit_length() - 1
        load[mask] = load[mask & (mask - 1)] + dem[low]

    route_cost = {}
    route_order = {}
    for mask in range(1, full + 1):
        if load[mask] > instance.capacity:
            continue  # demand bound prunes before any distance work
        members = [0] + [i + 1 for i in range(n) if mask >> i & 1]
        c, local = kernels.held_karp(D[np.ix_(members, members)], 0, 0)
        order = _canonical_cycle([members[i] for i in local])
        route_cost[mask] = c
        route_order[mask] = order[1:]

    best = np.full(full + 1, np.inf)
    choice = np.zeros(full + 1, dtype=np.int64)
    best[0] = 0.0
    for mask in range(1, full + 1):
        low = mask & -mask
        rest = mask ^ low
        sub = rest
        # submasks of ``mask`` that contain its lowest customer, largest first
        while True:
            s = sub | low
            if s in route_cost:
                cand = route_cost[s] + best[mask ^ s]
                if cand < best[mask]:
                    best[mask] = cand
                    choice[mask] = s
            if sub == 0:
                break
            sub = (sub - 1) & rest

    routes, mask = [], full
    while mask:
        s = int(choice[mask])
        routes.append(route_order[s])
        mask ^= s
    return routes_to_flags(routes), float(best[full])


def nearest_neighbor(instance, start: int = 0):
    """Greedy nearest-feasible-node construction.

    TSP: starts at node ``start`` (0-based).  CVRP: starts at the depot and goes
    back to it whenever no unserved customer fits the remaining capacity.
    Distance ties go to the lowest node index.
    """
    if isinstance(instance, TspInstance):
        D = distance_matrix(instance.coords)
        return Tour(kernels.nearest_neighbor_tour(D, start))
    return _nearest_neighbor_cvrp(instance)


def _nearest_neighbor_cvrp(instance: CvrpInstance) -> CvrpSolution:
    D = distance_matrix(instance.coords)
    dem = instance.demands
    cap = instance.capacity
    unserved = np.ones(instance.n + 1, dtype=bool)
    unserved[0] = False
    seq, flags = [], []
    cur, load = 0, 0
    while unserved.any():
        fits = unserved.copy()
        fits[1:] &= dem + load <= cap
        if not fits.any():
            cur, load = 0, 0
            continue
        row = np.where(fits, D[cur], np.inf)
        nxt = int(np.argmin(row))
        seq.append(nxt)
        flags.append(1 if cur == 0 else 0)
        unserved[nxt] = False
        load += int(dem[nxt - 1])
        cur = nxt
    return CvrpSolution(seq, flags)
