"""Labeled datasets and the partial-solution sampler.

A partial solution is a contiguous, oriented piece of a full solution.  The
same extraction code feeds training (teacher-forced targets) and the
re-construction loop at inference time, which also needs to put a rebuilt
segment back into its parent solution (:func:`install`).

Seed splitting: the sample for instance ``i`` in epoch ``e`` of a run with
root seed ``s`` is drawn from ``default_rng([s, e, i])``.
"""
from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .routing import (CvrpInstance, CvrpSolution, SchemaError, Tour, TspInstance,
                      flags_to_routes, from_record, path_length, solution_cost,
                      to_record, validate)

LABEL_SOURCES = ("exact", "heuristic", "self_improved")
MIN_SEGMENT = 4
MAX_RETRIES = 100


@dataclass(frozen=True, eq=False)
class LabeledInstance:
    instance: object
    solution: object
    label_source: str = "exact"

    def __post_init__(self):
        if self.label_source not in LABEL_SOURCES:
            raise ValueError(f"label_source must be one of {LABEL_SOURCES}")
        rep = validate(self.instance, self.solution)
        if not rep:
            raise ValueError(f"reference solution is invalid: {'; '.join(rep.problems)}")

    @property
    def cost(self) -> float:
        return solution_cost(self.instance, self.solution)


@dataclass(frozen=True)
class PartialSolution:
    """An oriented segment plus what is needed to re-insert it.

    TSP: ``nodes`` are 0-based, ``nodes[0]`` is the starting node and
    ``nodes[-1]`` the destination; ``rest`` continues the cycle from the
    destination back to the start.

    CVRP: ``nodes`` are customer ids beginning with the starting customer and
    ``flags`` their via-depot flags (``flags[0]`` is ignored); the segment ends
    at the depot.  ``start_load`` is the load of the open route right after
    serving the starting customer, ``prefix`` the customers served before it on
    the same route, and ``rest`` the untouched routes.
    """
    kind: str
    nodes: tuple[int, ...]
    flags: tuple[int, ...] = ()
    start_load: int = 0
    prefix: tuple[int, ...] = ()
    rest: tuple = ()
    reversed: bool = False

    @property
    def w(self) -> int:
        return len(self.nodes)

    @property
    def start(self) -> int:
        return self.nodes[0]

    @property
    def destination(self) -> int:
        return self.nodes[-1] if self.kind == "tsp" else 0

    @property
    def available(self) -> tuple[int, ...]:
        return self.nodes[1:-1] if self.kind == "tsp" else self.nodes[1:]

    def node_list(self) -> list[int]:
        """Node list with explicit depot visits, e.g. ``[2, 3, 0, 6, 5, 4, 0]``."""
        if self.kind == "tsp":
            return list(self.nodes)
        out = [self.nodes[0]]
        for c, f in zip(self.nodes[1:], self.flags[1:]):
            if f:
                out.append(0)
            out.append(c)
        return out + [0]


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """A partial solution laid out as a sub-instance with per-step targets.

    Rows of ``features`` follow the label: TSP row 0 is the start and row
    ``w-1`` the destination; CVRP row 0 is the depot and rows 1.. the segment
    customers.  Because the available rows are kept in label order, the target
    at every step is the first available row (action 2 for TSP, 4 + via-depot
    flag for CVRP); the network has no positional input, so the order leaks
    nothing.
    """
    partial: PartialSolution
    features: np.ndarray
    targets: np.ndarray
    demands: np.ndarray | None = None
    capacity: int = 0

    @property
    def size(self) -> int:
        return len(self.features)


# --------------------------------------------------------------------------- extraction

def extract_tsp(order: Sequence[int], w: int, start_index: int, reverse: bool) -> PartialSolution:
    n = len(order)
    if not MIN_SEGMENT <= w <= n:
        raise ValueError(f"segment length {w} outside [{MIN_SEGMENT}, {n}]")
    step = -1 if reverse else 1
    walk = [int(order[(start_index + step * k) % n]) for k in range(n)]
    return PartialSolution("tsp", tuple(walk[:w]), rest=tuple(walk[w:]), reversed=reverse)


def extract_cvrp(instance: CvrpInstance, routes: Sequence[Sequence[int]], w: int,
                 start_index: int, reverse: bool) -> PartialSolution | None:
    """Segment of the flattened (already oriented) routes, or ``None`` if the
    end-of-route snap would wrap onto the start's own route prefix."""
    routes = [list(r) for r in routes]
    if reverse:
        routes = routes[::-1]
    seq = [c for r in routes for c in r]
    route_of = [k for k, r in enumerate(routes) for _ in r]
    offset = [j for r in routes for j in range(len(r))]
    n = len(seq)
    if not MIN_SEGMENT <= w <= n:
        raise ValueError(f"segment length {w} outside [{MIN_SEGMENT}, {n}]")
    s = start_index % n
    end = s + w - 1
    # snap forward to the end of the route holding the last segment customer
    e = end % n
    end += len(routes[route_of[e]]) - 1 - offset[e]
    length = end - s + 1
    if length > n - offset[s]:
        return None
    r0 = route_of[s]
    prefix = routes[r0][:offset[s]]
    nodes, flags = [], []
    for k in range(length):
        p = (s + k) % n
        nodes.append(seq[p])
        flags.append(1 if offset[p] == 0 else 0)
    n_routes = len(routes)
    last_route = route_of[end % n]
    rest = []
    k = (last_route + 1) % n_routes
    while k != r0:
        rest.append(tuple(routes[k]))
        k = (k + 1) % n_routes
    dem = instance.demands
    start_load = int(sum(dem[c - 1] for c in prefix) + dem[nodes[0] - 1])
    return PartialSolution("cvrp", tuple(nodes), tuple(flags), start_load,
                           tuple(prefix), tuple(rest), reverse)


def sample_segment(instance, solution, rng: np.random.Generator) -> PartialSolution:
    """Draw ``w ~ U{4..n}``, a uniform start position and a uniform direction.

    For CVRP each route is also flipped with probability 1/2 (a flipped route
    has the same cost and load), and the segment end is extended to the end of
    its route.
    """
    if isinstance(instance, TspInstance):
        n = instance.n
        if n < MIN_SEGMENT:
            raise ValueError("instances need at least 4 nodes")
        w = int(rng.integers(MIN_SEGMENT, n + 1))
        s = int(rng.integers(n))
        rev = bool(rng.integers(2))
        return extract_tsp(solution.order, w, s, rev)
    n = instance.n
    if n < MIN_SEGMENT:
        raise ValueError("instances need at least 4 customers")
    base = flags_to_routes(solution)
    for _ in range(MAX_RETRIES):
        w = int(rng.integers(MIN_SEGMENT, n + 1))
        s = int(rng.integers(n))
        rev = bool(rng.integers(2))
        flips = rng.integers(2, size=len(base))
        routes = [r[::-1] if f else r for r, f in zip(base, flips)]
        part = extract_cvrp(instance, routes, w, s, rev)
        if part is not None:
            return part
    raise RuntimeError(f"no valid CVRP segment after {MAX_RETRIES} draws")


def to_sample(instance, part: PartialSolution) -> TrainingSample:
    if part.kind == "tsp":
        feats = np.asarray(instance.coords)[list(part.nodes)]
        targets = np.full(part.w - 2, 2, dtype=np.int64)
        return TrainingSample(part, feats, targets)
    rows = [0, *part.nodes]
    feats = instance.features()[rows]
    demands = np.concatenate([[0], instance.demands])[rows]
    targets = 4 + np.asarray(part.flags[1:], dtype=np.int64)
    return TrainingSample(part, feats, targets, demands, instance.capacity)


def sample_partial(labeled: LabeledInstance, rng: np.random.Generator) -> TrainingSample:
    part = sample_segment(labeled.instance, labeled.solution, rng)
    return to_sample(labeled.instance, part)


# --------------------------------------------------------------------------- segment costs and re-insertion

def segment_cost(instance, part: PartialSolution, nodes=None, flags=None) -> float:
    """Cost of the segment path.  TSP: start to destination.  CVRP: start to
    the final depot return, through the depot wherever a flag is set."""
    nodes = part.nodes if nodes is None else nodes
    c = instance.coords
    if part.kind == "tsp":
        return path_length(c, nodes)
    flags = part.flags if flags is None else flags
    walk = [nodes[0]]
    for v, f in zip(nodes[1:], flags[1:]):
        if f:
            walk.append(0)
        walk.append(v)
    walk.append(0)
    return path_length(c, walk)


def install(part: PartialSolution, nodes: Sequence[int], flags: Sequence[int] | None = None):
    """Full solution with the segment replaced by ``nodes`` (same endpoints)."""
    nodes = [int(v) for v in nodes]
    if part.kind == "tsp":
        if nodes[0] != part.nodes[0] or nodes[-1] != part.nodes[-1]:
            raise ValueError("replacement must keep the segment endpoints")
        return Tour(nodes + list(part.rest))
    if nodes[0] != part.nodes[0]:
        raise ValueError("replacement must keep the starting customer")
    flags = [int(f) for f in flags]
    seq = list(part.prefix) + nodes
    fl = [1] + [0] * (len(part.prefix) - 1) if part.prefix else []
    fl += [0 if part.prefix else 1] + flags[1:]
    for r in part.rest:
        seq += list(r)
        fl += [1] + [0] * (len(r) - 1)
    return CvrpSolution(seq, fl)


# --------------------------------------------------------------------------- batching

def batch(samples: Sequence[TrainingSample], max_batch: int) -> list[list[TrainingSample]]:
    """Group samples by sub-instance size, then cut into batches of at most
    ``max_batch``.  Groups appear in order of first occurrence."""
    if max_batch < 1:
        raise ValueError("max_batch must be >= 1")
    groups: dict[int, list[TrainingSample]] = defaultdict(list)
    for s in samples:
        groups[s.size].append(s)
    out = []
    for group in groups.values():
        for i in range(0, len(group), max_batch):
            out.append(group[i:i + max_batch])
    return out


# --------------------------------------------------------------------------- files

class DatasetError(ValueError):
    def __init__(self, path, line: int, msg: str):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {msg}")


def labeled_record(item: LabeledInstance, **extra) -> dict:
    return to_record(item.instance, item.solution, label_source=item.label_source, **extra)


def write_dataset(path, items: Iterable, manifest: dict | None = None) -> int:
    """Write ``LabeledInstance`` objects or bare instances, one JSON object per
    line.  Returns the number of records written."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    count = 0
    with open(tmp, "w") as fh:
        for item in items:
            if isinstance(item, LabeledInstance):
                rec = labeled_record(item)
            elif isinstance(item, dict):
                rec = item
            else:
                rec = to_record(item)
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
            count += 1
    os.replace(tmp, path)
    if manifest is not None:
        write_manifest(path, {**manifest, "records": count})
    return count


def iter_records(path) -> Iterator[tuple[int, dict]]:
    """Stream ``(line_number, record)`` pairs; blank lines are skipped."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if not line.endswith("\n"):
                # a writer that died mid-record leaves an unterminated line
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    raise DatasetError(path, lineno, "truncated record") from None
            else:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DatasetError(path, lineno, f"invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(path, lineno, "record is not a JSON object")
            yield lineno, rec


def read_instances(path) -> Iterator[tuple[object, object | None, dict]]:
    """Stream ``(instance, solution_or_None, record)``."""
    for lineno, rec in iter_records(path):
        try:
            inst, sol = from_record(rec)
        except SchemaError as e:
            raise DatasetError(path, lineno, str(e)) from None
        if sol is not None:
            rep = validate(inst, sol)
            if not rep:
                raise DatasetError(path, lineno, "invalid solution: " + "; ".join(rep.problems))
        yield inst, sol, rec


def read_dataset(path) -> Iterator[LabeledInstance]:
    """Stream labeled instances; records without a solution are an error."""
    for lineno, rec in iter_records(path):
        try:
            inst, sol = from_record(rec)
        except SchemaError as e:
            raise DatasetError(path, lineno, str(e)) from None
        if sol is None:
            raise DatasetError(path, lineno, "record has no reference solution")
        try:
            yield LabeledInstance(inst, sol, rec.get("label_source", "exact"))
        except ValueError as e:
            raise DatasetError(path, lineno, str(e)) from None


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_manifest(path, info: dict) -> Path:
    mp = manifest_path(path)
    mp.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return mp


def read_manifest(path) -> dict | None:
    mp = manifest_path(path)
    if not mp.exists():
        return None
    return json.loads(mp.read_text())


def epoch_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])
