"""TSPLib / CVRPLib readers and writers, normalization into the unit square.

Only the EUC_2D edge-weight type is supported.  Rounded TSPLib lengths use
the nearest-integer convention ``nint(x) = floor(x + 0.5)`` (ties round up).

``parse_tsplib`` / ``parse_cvrplib`` return instances in the file's own
units; :func:`ingest` additionally normalizes them and records the scale so
costs can be reported in original units.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .routing import CvrpInstance, TspInstance

SUPPORTED_WEIGHTS = ("EUC_2D",)
METRIC_NOTE = "euclidean; tsplib rounding nint(x)=floor(x+0.5)"


class LibFormatError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class UnsupportedFormat(LibFormatError):
    pass


@dataclass
class LibMeta:
    name: str = ""
    type: str = ""
    comment: str = ""
    dimension: int = 0
    edge_weight_type: str = ""
    capacity: int | None = None
    node_ids: list[int] = field(default_factory=list)
    depot_id: int | None = None
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    warnings: list[str] = field(default_factory=list)


_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION", "TOUR_SECTION")


def _number(tok: str, line: int, what: str) -> float:
    try:
        x = float(tok)
    except ValueError:
        raise LibFormatError(f"bad {what} {tok!r}", line) from None
    if not math.isfinite(x):
        raise LibFormatError(f"non-finite {what} {tok!r}", line)
    return x


def _int(tok: str, line: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise LibFormatError(f"bad {what} {tok!r}", line) from None


def _scan(text: str):
    """Split a TSPLib-style file into a header dict and per-section line lists."""
    if not isinstance(text, str):
        raise LibFormatError("input is not text")
    header: dict[str, tuple[str, int]] = {}
    sections: dict[str, list[tuple[int, list[str]]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        head = line.split(":", 1)[0].split(None, 1)[0].upper() if line[0] != ":" else ""
        if head == "EOF":
            break
        if head in _SECTIONS:
            if head in sections:
                raise LibFormatError(f"duplicate section {head}", lineno)
            rest = line[len(head):].strip().lstrip(":").strip()
            if rest:
                raise LibFormatError(f"unexpected text after {head}", lineno)
            current = head
            sections[head] = []
            continue
        if ":" in line and head[:1].isalpha() and head.replace("_", "").isalnum():
            key, value = line.split(":", 1)
            key = key.strip().upper()
            if key in header:
                raise LibFormatError(f"duplicate header {key}", lineno)
            header[key] = (value.strip(), lineno)
            current = None
            continue
        if current is None:
            raise LibFormatError(f"unexpected line {line[:40]!r}", lineno)
        sections[current].append((lineno, line.split()))
    return header, sections


def _header_int(header, key, required=True):
    if key not in header:
        if required:
            raise LibFormatError(f"missing {key}")
        return None
    value, line = header[key]
    x = _int(value, line, key)
    if x <= 0:
        raise LibFormatError(f"{key} must be positive", line)
    return x


def _check_weights(header):
    ew, line = header.get("EDGE_WEIGHT_TYPE", ("", None))
    if ew.upper() not in SUPPORTED_WEIGHTS:
        raise UnsupportedFormat(f"unsupported EDGE_WEIGHT_TYPE {ew or '(missing)'!r}; "
                                f"supported: {', '.join(SUPPORTED_WEIGHTS)}", line)
    return ew.upper()


def _coords(sections, dim) -> tuple[list[int], np.ndarray]:
    if "NODE_COORD_SECTION" not in sections:
        raise LibFormatError("missing NODE_COORD_SECTION")
    ids, xy = [], []
    for lineno, tok in sections["NODE_COORD_SECTION"]:
        if len(tok) != 3:
            raise LibFormatError(f"coordinate line needs 'id x y', got {len(tok)} fields", lineno)
        ids.append(_int(tok[0], lineno, "node id"))
        xy.append((_number(tok[1], lineno, "coordinate"), _number(tok[2], lineno, "coordinate")))
    if len(ids) != dim:
        raise LibFormatError(f"DIMENSION is {dim} but {len(ids)} coordinates were given")
    if sorted(ids) != list(range(1, dim + 1)):
        raise LibFormatError("node ids must be exactly 1..DIMENSION")
    order = np.argsort(ids, kind="stable")
    return sorted(ids), np.asarray(xy, dtype=np.float64)[order]


def _meta(header, kind, dim, ids, xy) -> LibMeta:
    return LibMeta(name=header.get("NAME", ("", 0))[0], type=kind,
                   comment=header.get("COMMENT", ("", 0))[0], dimension=dim,
                   edge_weight_type="EUC_2D", node_ids=ids,
                   bounds=(float(xy[:, 0].min()), float(xy[:, 1].min()),
                           float(xy[:, 0].max()), float(xy[:, 1].max())))


def parse_tsplib(text: str) -> tuple[TspInstance, LibMeta]:
    try:
        header, sections = _scan(text)
        typ = header.get("TYPE", ("TSP", None))
        if typ[0].upper() != "TSP":
            raise UnsupportedFormat(f"TYPE {typ[0]!r} is not TSP", typ[1])
        _check_weights(header)
        dim = _header_int(header, "DIMENSION")
        for s in sections:
            if s != "NODE_COORD_SECTION":
                raise LibFormatError(f"unexpected {s} in a TSP file")
        ids, xy = _coords(sections, dim)
        return TspInstance(xy), _meta(header, "TSP", dim, ids, xy)
    except LibFormatError:
        raise
    except (ValueError, IndexError, OverflowError) as e:
        raise LibFormatError(str(e)) from None


def parse_cvrplib(text: str) -> tuple[CvrpInstance, LibMeta]:
    try:
        header, sections = _scan(text)
        typ = header.get("TYPE", ("CVRP", None))
        if typ[0].upper() != "CVRP":
            raise UnsupportedFormat(f"TYPE {typ[0]!r} is not CVRP", typ[1])
        _check_weights(header)
        for key in ("DISTANCE", "SERVICE_TIME"):
            if key in header:
                raise UnsupportedFormat(f"{key} constraints are not supported", header[key][1])
        dim = _header_int(header, "DIMENSION")
        cap = _header_int(header, "CAPACITY")
        ids, xy = _coords(sections, dim)
        for s in ("DEMAND_SECTION", "DEPOT_SECTION"):
            if s not in sections:
                raise LibFormatError(f"missing {s}")
        demand = {}
        for lineno, tok in sections["DEMAND_SECTION"]:
            if len(tok) != 2:
                raise LibFormatError("demand line needs 'id demand'", lineno)
            i, d = _int(tok[0], lineno, "node id"), _int(tok[1], lineno, "demand")
            if i in demand:
                raise LibFormatError(f"duplicate demand for node {i}", lineno)
            if not 1 <= i <= dim:
                raise LibFormatError(f"demand for unknown node {i}", lineno)
            if d < 0:
                raise LibFormatError(f"negative demand {d}", lineno)
            demand[i] = (d, lineno)
        if len(demand) != dim:
            raise LibFormatError(f"DEMAND_SECTION lists {len(demand)} of {dim} nodes")
        depots = []
        terminated = False
        for lineno, tok in sections["DEPOT_SECTION"]:
            for t in tok:
                v = _int(t, lineno, "depot id")
                if v == -1:
                    terminated = True
                    break
                if terminated:
                    raise LibFormatError("depot ids after -1", lineno)
                depots.append((v, lineno))
        if len(depots) != 1:
            raise UnsupportedFormat(f"expected exactly one depot, found {len(depots)}")
        depot, dline = depots[0]
        if not 1 <= depot <= dim:
            raise LibFormatError(f"depot {depot} is not a node", dline)
        meta = _meta(header, "CVRP", dim, ids, xy)
        meta.capacity, meta.depot_id = cap, depot
        if demand[depot][0] != 0:
            msg = f"depot demand {demand[depot][0]} coerced to 0"
            meta.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
        customers = [i for i in ids if i != depot]
        if not customers:
            raise LibFormatError("no customers")
        dem = []
        for i in customers:
            d, lineno = demand[i]
            if d > cap:
                raise LibFormatError(f"customer {i} demand {d} exceeds capacity {cap}", lineno)
            if d < 1:
                raise LibFormatError(f"customer {i} has zero demand", lineno)
            dem.append(d)
        inst = CvrpInstance(xy[depot - 1], xy[[i - 1 for i in customers]], dem, cap)
        meta.node_ids = [depot, *customers]
        return inst, meta
    except LibFormatError:
        raise
    except (ValueError, IndexError, OverflowError) as e:
        raise LibFormatError(str(e)) from None


def parse_tour(text: str, dimension: int | None = None) -> list[int]:
    """TOUR_SECTION node ids (1-based in the file) as a 0-based order."""
    header, sections = _scan(text)
    if "TOUR_SECTION" not in sections:
        raise LibFormatError("missing TOUR_SECTION")
    order = []
    for lineno, tok in sections["TOUR_SECTION"]:
        for t in tok:
            v = _int(t, lineno, "node id")
            if v == -1:
                break
            order.append(v - 1)
    dim = dimension or (_header_int(header, "DIMENSION", required=False))
    if dim is not None and sorted(order) != list(range(dim)):
        raise LibFormatError("tour is not a permutation of 1..DIMENSION")
    return order


# --------------------------------------------------------------------------- writers

def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_tsplib(instance: TspInstance, name: str = "instance", comment: str = "") -> str:
    lines = [f"NAME : {name}"]
    if comment:
        lines.append(f"COMMENT : {comment}")
    lines += ["TYPE : TSP", f"DIMENSION : {instance.n}", "EDGE_WEIGHT_TYPE : EUC_2D",
              "NODE_COORD_SECTION"]
    lines += [f"{i} {_fmt(x)} {_fmt(y)}" for i, (x, y) in enumerate(instance.coords, 1)]
    return "\n".join(lines + ["EOF", ""])


def serialize_cvrplib(instance: CvrpInstance, name: str = "instance", comment: str = "") -> str:
    """Depot written as node 1, customers as 2..n+1."""
    lines = [f"NAME : {name}"]
    if comment:
        lines.append(f"COMMENT : {comment}")
    lines += ["TYPE : CVRP", f"DIMENSION : {instance.n + 1}", "EDGE_WEIGHT_TYPE : EUC_2D",
              f"CAPACITY : {instance.capacity}", "NODE_COORD_SECTION"]
    lines += [f"{i} {_fmt(x)} {_fmt(y)}" for i, (x, y) in enumerate(instance.coords, 1)]
    lines.append("DEMAND_SECTION")
    lines += [f"{i} {d}" for i, d in enumerate([0, *instance.demands.tolist()], 1)]
    lines += ["DEPOT_SECTION", "1", "-1", "EOF", ""]
    return "\n".join(lines)


# --------------------------------------------------------------------------- normalization and metrics

@dataclass(frozen=True)
class Normalization:
    scale: float
    offset: tuple[float, float]

    def to_original(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords) * self.scale + np.asarray(self.offset)


def normalize_coords(instance):
    """Translate to the origin and divide by the larger axis range.

    Returns ``(normalized_instance, Normalization)``; lengths in the original
    units equal normalized lengths times ``scale``.
    """
    c = instance.coords
    lo = c.min(axis=0)
    span = c.max(axis=0) - lo
    scale = float(span.max())
    if not scale > 0:
        raise ValueError("cannot normalize: all points coincide")
    norm = Normalization(scale, (float(lo[0]), float(lo[1])))
    z = (c - lo) / scale
    if isinstance(instance, TspInstance):
        return TspInstance(z), norm
    return CvrpInstance(z[0], z[1:], instance.demands, instance.capacity), norm


def nint(x: float) -> int:
    return int(math.floor(x + 0.5))


def tsplib_metric(coords: np.ndarray, order: Sequence[int]) -> int:
    """Closed-tour length with every edge rounded by :func:`nint`."""
    c = np.asarray(coords, dtype=np.float64)
    total = 0
    n = len(order)
    for k in range(n):
        a, b = c[order[k]], c[order[(k + 1) % n]]
        total += nint(math.hypot(a[0] - b[0], a[1] - b[1]))
    return total


def ingest(text: str, fmt: str, source: str = "") -> tuple[object, dict]:
    """Parse and normalize; returns the unit-square instance and a provenance block."""
    if fmt == "tsplib":
        inst, meta = parse_tsplib(text)
    elif fmt == "cvrplib":
        inst, meta = parse_cvrplib(text)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    norm_inst, norm = normalize_coords(inst)
    prov = {"source": source, "name": meta.name, "format": fmt, "scale": norm.scale,
            "offset": list(norm.offset), "metric": METRIC_NOTE, "warnings": meta.warnings}
    return norm_inst, prov
