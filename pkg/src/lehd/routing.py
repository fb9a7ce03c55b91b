"""TSP / CVRP instances, solutions, generators, evaluators and validators.

Index conventions
-----------------
* TSP: nodes are 0-based inside the library (``Tour.order``) and 1-based in
  every serialized record.
* CVRP: ``CvrpInstance.coords`` stacks the depot at row 0 followed by the
  customers, so customer ids are 1..n both internally and externally.  A
  solution is a customer permutation plus one via-depot flag per position
  (flag 1: the customer is reached from the depot).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1

# capacity by problem size for the standard CVRP benchmark sizes
CVRP_CAPACITY = {100: 50, 200: 80, 500: 100, 1000: 250}
MAX_DEMAND = 9


class InvalidSolution(ValueError):
    def __init__(self, report: "Report"):
        self.report = report
        super().__init__("; ".join(report.problems) or "invalid solution")


@dataclass(frozen=True, eq=False)
class TspInstance:
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2 or len(c) < 1:
            raise ValueError(f"coords must have shape (n, 2), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    kind = "tsp"

    @property
    def n(self) -> int:
        return len(self.coords)


@dataclass(frozen=True, eq=False)
class CvrpInstance:
    depot: np.ndarray
    customers: np.ndarray
    demands: np.ndarray
    capacity: int

    kind = "cvrp"

    def __post_init__(self):
        depot = np.asarray(self.depot, dtype=np.float64).reshape(2)
        cust = np.asarray(self.customers, dtype=np.float64).reshape(-1, 2)
        dem = np.asarray(self.demands, dtype=np.int64).reshape(-1)
        if len(dem) != len(cust):
            raise ValueError(f"{len(cust)} customers but {len(dem)} demands")
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if len(dem) and dem.min() < 1:
            raise ValueError("customer demands must be >= 1")
        if len(dem) and dem.max() > self.capacity:
            i = int(dem.argmax()) + 1
            raise ValueError(f"customer {i} demand {int(dem.max())} exceeds capacity {self.capacity}")
        coords = np.vstack([depot[None], cust])
        for a in (depot, cust, dem, coords):
            a.setflags(write=False)
        object.__setattr__(self, "depot", depot)
        object.__setattr__(self, "customers", cust)
        object.__setattr__(self, "demands", dem)
        object.__setattr__(self, "capacity", int(self.capacity))
        object.__setattr__(self, "_coords", coords)

    @property
    def n(self) -> int:
        return len(self.customers)

    @property
    def coords(self) -> np.ndarray:
        """Depot at row 0, customers at rows 1..n."""
        return self._coords

    @property
    def normalized_demands(self) -> np.ndarray:
        return self.demands / self.capacity

    def features(self) -> np.ndarray:
        """(n+1, 3) node features: x, y, normalized demand (depot demand 0)."""
        d = np.concatenate([[0.0], self.normalized_demands])
        return np.column_stack([self.coords, d])


@dataclass(frozen=True)
class Tour:
    order: tuple[int, ...]

    def __init__(self, order: Iterable[int]):
        object.__setattr__(self, "order", tuple(int(i) for i in order))

    def __len__(self):
        return len(self.order)


@dataclass(frozen=True)
class CvrpSolution:
    sequence: tuple[int, ...]
    via_depot: tuple[int, ...]

    def __init__(self, sequence: Iterable[int], via_depot: Iterable[int]):
        object.__setattr__(self, "sequence", tuple(int(i) for i in sequence))
        object.__setattr__(self, "via_depot", tuple(int(f) for f in via_depot))
        if len(self.sequence) != len(self.via_depot):
            raise ValueError("sequence and via_depot flags differ in length")

    def __len__(self):
        return len(self.sequence)

    def routes(self) -> list[list[int]]:
        return flags_to_routes(self)


@dataclass
class Report:
    ok: bool = True
    problems: list[str] = field(default_factory=list)
    duplicates: list[int] = field(default_factory=list)
    missing: list[int] = field(default_factory=list)
    unknown: list[int] = field(default_factory=list)
    overloaded_routes: list[tuple[int, int]] = field(default_factory=list)

    def fail(self, msg):
        self.ok = False
        self.problems.append(msg)

    def __bool__(self):
        return self.ok


# --------------------------------------------------------------------------- generation

def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def generate_tsp(n: int, rng=None) -> TspInstance:
    if n < 4:
        raise ValueError(f"n={n}: problems with fewer than 4 nodes are trivial")
    return TspInstance(_rng(rng).random((n, 2)))


def default_capacity(n: int) -> int:
    if n in CVRP_CAPACITY:
        return CVRP_CAPACITY[n]
    if n <= 20:
        return 30
    if n <= 50:
        return 40
    raise ValueError(f"no default capacity for n={n}; pass capacity explicitly")


def generate_cvrp(n: int, capacity: int | None = None, rng=None) -> CvrpInstance:
    if n < 4:
        raise ValueError(f"n={n}: problems with fewer than 4 nodes are trivial")
    if capacity is None:
        capacity = default_capacity(n)
    if capacity < MAX_DEMAND:
        raise ValueError(f"capacity {capacity} is below the maximum demand {MAX_DEMAND}")
    g = _rng(rng)
    depot = g.random(2)
    customers = g.random((n, 2))
    demands = g.integers(1, MAX_DEMAND + 1, size=n)
    return CvrpInstance(depot, customers, demands, capacity)


# --------------------------------------------------------------------------- evaluation

def distance_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def path_length(coords: np.ndarray, order: Sequence[int]) -> float:
    """Open path length through ``coords[order]``."""
    total = 0.0
    for i in range(len(order) - 1):
        total += _dist(coords[order[i]], coords[order[i + 1]])
    return total


def validate_tour(instance: TspInstance, tour) -> Report:
    order = list(tour.order if isinstance(tour, Tour) else tour)
    rep = Report()
    n = instance.n
    seen = {}
    for v in order:
        if not (0 <= v < n):
            rep.unknown.append(v)
        seen[v] = seen.get(v, 0) + 1
    rep.duplicates = sorted(v for v, c in seen.items() if c > 1)
    rep.missing = sorted(set(range(n)) - set(seen))
    if rep.unknown:
        rep.fail(f"unknown nodes {rep.unknown}")
    if rep.duplicates:
        rep.fail(f"duplicate nodes {rep.duplicates}")
    if rep.missing:
        rep.fail(f"missing nodes {rep.missing}")
    return rep


def tour_length(instance: TspInstance, tour) -> float:
    """Closed-loop Euclidean length, including the return edge."""
    rep = validate_tour(instance, tour)
    if not rep:
        raise InvalidSolution(rep)
    order = list(tour.order if isinstance(tour, Tour) else tour)
    c = instance.coords
    return path_length(c, order) + _dist(c[order[-1]], c[order[0]])


def flags_to_routes(sol: CvrpSolution) -> list[list[int]]:
    if not sol.sequence:
        raise ValueError("empty solution")
    if sol.via_depot[0] != 1:
        raise ValueError("first customer must be reached via the depot (flag 1)")
    routes: list[list[int]] = []
    for c, f in zip(sol.sequence, sol.via_depot):
        if f not in (0, 1):
            raise ValueError(f"flag {f} is not binary")
        if f == 1:
            routes.append([c])
        else:
            routes[-1].append(c)
    return routes


def routes_to_flags(routes: Sequence[Sequence[int]]) -> CvrpSolution:
    seq, flags = [], []
    for r in routes:
        if len(r) == 0:
            raise ValueError("empty route")
        for k, c in enumerate(r):
            seq.append(int(c))
            flags.append(1 if k == 0 else 0)
    return CvrpSolution(seq, flags)


def route_list_with_depot(sol: CvrpSolution) -> list[int]:
    """``{0,1,2,3,0,4,5,0,...,0}`` style node list."""
    out = [0]
    for r in flags_to_routes(sol):
        out.extend(r)
        out.append(0)
    return out


def validate_cvrp(instance: CvrpInstance, sol: CvrpSolution) -> Report:
    rep = Report()
    n = instance.n
    seq = list(sol.sequence)
    seen = {}
    for v in seq:
        if not (1 <= v <= n):
            rep.unknown.append(v)
        seen[v] = seen.get(v, 0) + 1
    rep.duplicates = sorted(v for v, c in seen.items() if c > 1)
    rep.missing = sorted(set(range(1, n + 1)) - set(seen))
    if rep.unknown:
        rep.fail(f"unknown customers {rep.unknown}")
    if rep.duplicates:
        rep.fail(f"duplicate customers {rep.duplicates}")
    if rep.missing:
        rep.fail(f"missing customers {rep.missing}")
    if len(sol.via_depot) != len(seq):
        rep.fail("flag count differs from sequence length")
        return rep
    if seq and sol.via_depot[0] != 1:
        rep.fail("first customer must be reached via the depot")
    if any(f not in (0, 1) for f in sol.via_depot):
        rep.fail("flags must be 0 or 1")
        return rep
    if rep.unknown or not seq:
        if not seq and n:
            rep.fail("empty solution")
        return rep
    load, r = 0, -1
    for c, f in zip(seq, sol.via_depot):
        if f == 1 or r < 0:
            if r >= 0 and load > instance.capacity:
                rep.overloaded_routes.append((r, load))
            r, load = r + 1, 0
        load += int(instance.demands[c - 1])
    if load > instance.capacity:
        rep.overloaded_routes.append((r, load))
    for r, load in rep.overloaded_routes:
        rep.fail(f"route {r} demand {load} exceeds capacity {instance.capacity}")
    return rep


def cvrp_cost(instance: CvrpInstance, sol: CvrpSolution) -> float:
    rep = validate_cvrp(instance, sol)
    if not rep:
        raise InvalidSolution(rep)
    return _cvrp_cost_unchecked(instance.coords, sol.sequence, sol.via_depot)


def _cvrp_cost_unchecked(coords, seq, flags) -> float:
    total = 0.0
    prev = 0
    for c, f in zip(seq, flags):
        if f == 1 and prev != 0:
            total += _dist(coords[prev], coords[0])
            prev = 0
        total += _dist(coords[prev], coords[c])
        prev = c
    return total + _dist(coords[prev], coords[0])


def routes_cost(instance: CvrpInstance, routes: Sequence[Sequence[int]]) -> float:
    """Cost of an explicit depot-delimited route list (no validation)."""
    c = instance.coords
    total = 0.0
    for r in routes:
        total += path_length(c, [0, *r, 0])
    return total


def solution_cost(instance, sol) -> float:
    if isinstance(instance, TspInstance):
        return tour_length(instance, sol)
    return cvrp_cost(instance, sol)


def validate(instance, sol) -> Report:
    if isinstance(instance, TspInstance):
        return validate_tour(instance, sol)
    return validate_cvrp(instance, sol)


# --------------------------------------------------------------------------- records

def to_record(instance, solution=None, **extra) -> dict:
    """JSON-ready dict.  TSP sequences are written 1-based."""
    rec: dict = {"version": SCHEMA_VERSION, "kind": instance.kind}
    if isinstance(instance, TspInstance):
        rec["coords"] = instance.coords.tolist()
        if solution is not None:
            rec["sequence"] = [i + 1 for i in solution.order]
    else:
        rec["coords"] = instance.coords.tolist()
        rec["demands"] = instance.demands.tolist()
        rec["capacity"] = instance.capacity
        if solution is not None:
            rec["sequence"] = list(solution.sequence)
            rec["flags"] = list(solution.via_depot)
    rec.update(extra)
    return rec


class SchemaError(ValueError):
    pass


def from_record(rec: dict):
    """Inverse of :func:`to_record`: returns ``(instance, solution_or_None)``."""
    if not isinstance(rec, dict):
        raise SchemaError("record is not a JSON object")
    version = rec.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {version}")
    kind = rec.get("kind")
    try:
        coords = np.asarray(rec["coords"], dtype=np.float64)
        if kind == "tsp":
            inst = TspInstance(coords)
            sol = None
            if rec.get("sequence") is not None:
                sol = Tour(i - 1 for i in rec["sequence"])
        elif kind == "cvrp":
            if coords.ndim != 2 or coords.shape[1] != 2:
                raise SchemaError(f"coords must be (n+1, 2), got {coords.shape}")
            inst = CvrpInstance(coords[0], coords[1:], rec["demands"], int(rec["capacity"]))
            sol = None
            if rec.get("sequence") is not None:
                sol = CvrpSolution(rec["sequence"], rec["flags"])
        else:
            raise SchemaError(f"unknown kind {kind!r}")
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{type(e).__name__}: {e}") from e
    return inst, sol
