"""Greedy solving, random re-construction (RRC) and benchmark tables.

Instances are processed in fixed chunks of consecutive inputs; inside a
chunk, constructions and segment rebuilds of equal size run as one batch.
Instance ``i`` always draws from ``default_rng([seed, i])``, and chunking
does not depend on the worker count, so results are identical for any
number of workers.
"""
from __future__ import annotations

import csv
import io
import multiprocessing as mp
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import PartialSolution, install, sample_segment, segment_cost
from .model import LehdModel, construct_batch, rollout_cvrp, rollout_tsp
from .oracles import held_karp_path, nearest_neighbor
from .routing import solution_cost, validate

CHUNK = 50


def gap(cost: float, reference: float) -> float:
    """Optimality gap in percent; negative when ``cost`` beats the reference."""
    if not reference > 0:
        raise ValueError(f"reference cost must be positive, got {reference}")
    return 100.0 * (cost / reference - 1.0)


# --------------------------------------------------------------------------- reconstructors

class ModelReconstructor:
    """Greedy re-construction of segments with a trained network."""

    def __init__(self, model: LehdModel):
        self.model = model

    def __call__(self, jobs: Sequence[tuple[object, PartialSolution]]) -> list[tuple[list, list | None]]:
        out: list = [None] * len(jobs)
        groups = defaultdict(list)
        for j, (inst, part) in enumerate(jobs):
            groups[(part.kind, part.w)].append(j)
        for (kind, w), idx in groups.items():
            B = len(idx)
            if kind == "tsp":
                coords = np.stack([jobs[j][0].coords[list(jobs[j][1].nodes)] for j in idx])
                avail = np.tile(np.arange(1, w - 1), (B, 1))
                rows = rollout_tsp(self.model, coords, np.full(B, w - 1), np.zeros(B, dtype=np.int64), avail)
                for b, j in enumerate(idx):
                    nodes = jobs[j][1].nodes
                    out[j] = ([nodes[0], *(nodes[r] for r in rows[b]), nodes[-1]], None)
            else:
                feats, dem = [], []
                for j in idx:
                    inst, part = jobs[j]
                    sel = [0, *part.nodes]
                    feats.append(inst.features()[sel])
                    dem.append(np.concatenate([[0], inst.demands])[sel])
                cap = np.array([jobs[j][0].capacity for j in idx])
                load = np.array([jobs[j][1].start_load for j in idx])
                avail = np.tile(np.arange(2, w + 1), (B, 1))
                rows, flags = rollout_cvrp(self.model, np.stack(feats), np.stack(dem), cap,
                                           np.ones(B, dtype=np.int64), load, avail)
                for b, j in enumerate(idx):
                    part = jobs[j][1]
                    seq = [0, *part.nodes]
                    out[j] = ([part.nodes[0], *(seq[r] for r in rows[b])],
                              [part.flags[0], *flags[b].tolist()])
        return out


def oracle_reconstructor(jobs):
    """Optimal fixed-endpoint path for each TSP segment (Held-Karp)."""
    out = []
    for inst, part in jobs:
        if part.kind != "tsp":
            raise ValueError("the Held-Karp reconstructor handles TSP segments only")
        path, _ = held_karp_path(inst.coords, part.nodes, part.nodes[0], part.nodes[-1])
        out.append((path, None))
    return out


def _as_reconstructor(model_or_fn) -> Callable:
    if isinstance(model_or_fn, LehdModel):
        return ModelReconstructor(model_or_fn)
    return model_or_fn


# --------------------------------------------------------------------------- RRC

@dataclass
class TraceEntry:
    iteration: int
    start: int
    destination: int
    w: int
    reversed: bool
    accepted: bool
    cost_after: float
    note: str = ""


@dataclass
class RrcTrace:
    initial_cost: float
    entries: list[TraceEntry] = field(default_factory=list)

    @property
    def costs(self) -> list[float]:
        return [e.cost_after for e in self.entries]

    def to_rows(self) -> list[dict]:
        return [vars(e) for e in self.entries]


def rrc_batch(instances: Sequence, solutions: Sequence, reconstruct, iters: int,
              rngs: Sequence[np.random.Generator], snapshots: Sequence[int] = ()):
    """Run ``iters`` re-construction rounds on every solution in lockstep.

    Returns ``(solutions, costs, traces, snaps)`` where ``snaps[k]`` holds the
    ``(solution, cost)`` pairs after ``k`` iterations for each requested ``k``.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    reconstruct = _as_reconstructor(reconstruct)
    sols = list(solutions)
    for inst, sol in zip(instances, sols):
        rep = validate(inst, sol)
        if not rep:
            raise ValueError("initial solution is invalid: " + "; ".join(rep.problems))
    costs = [solution_cost(i, s) for i, s in zip(instances, sols)]
    traces = [RrcTrace(c) for c in costs]
    snaps = {k: None for k in snapshots}
    if 0 in snaps:
        snaps[0] = list(zip(sols, costs))
    for it in range(1, iters + 1):
        parts = [sample_segment(inst, sol, g) for inst, sol, g in zip(instances, sols, rngs)]
        rebuilt = reconstruct(list(zip(instances, parts)))
        for b, (inst, part, (nodes, flags)) in enumerate(zip(instances, parts, rebuilt)):
            old = segment_cost(inst, part)
            new = segment_cost(inst, part, nodes, flags)
            accepted, note = False, ""
            if new < old:
                cand = install(part, nodes, flags)
                rep = validate(inst, cand)
                if rep:
                    sols[b] = cand
                    costs[b] = costs[b] - old + new
                    accepted = True
                else:
                    note = "rejected infeasible: " + "; ".join(rep.problems)
            traces[b].entries.append(TraceEntry(it, part.start, part.destination, part.w,
                                                part.reversed, accepted, costs[b], note))
        if it in snaps:
            snaps[it] = list(zip(sols, costs))
    return sols, costs, traces, snaps


def rrc(instance, solution, model_or_fn, iters: int, seed=0):
    """Improve one solution; returns ``(solution, trace)``."""
    g = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sols, _costs, traces, _ = rrc_batch([instance], [solution], model_or_fn, iters, [g])
    return sols[0], traces[0]


# --------------------------------------------------------------------------- greedy

def _greedy_chunk(instances, model, rngs, starts):
    """Best-of-``starts`` greedy construction (TSP: distinct random first nodes)."""
    out = [None] * len(instances)
    groups = defaultdict(list)
    for j, inst in enumerate(instances):
        groups[(inst.kind, inst.n)].append(j)
    for (kind, n), idx in groups.items():
        reps, firsts, owner = [], [], []
        for j in idx:
            if kind == "tsp":
                k = min(starts, n)
                fs = rngs[j].choice(n, size=k, replace=False) if k > 1 else [int(rngs[j].integers(n))]
                for f in fs:
                    reps.append(instances[j])
                    firsts.append(int(f))
                    owner.append(j)
            else:
                reps.append(instances[j])
                owner.append(j)
        sols = construct_batch(reps, model, "greedy", first_nodes=firsts if kind == "tsp" else None)
        for j, inst, sol in zip(owner, reps, sols):
            c = solution_cost(inst, sol)
            if out[j] is None or c < out[j][1]:
                out[j] = (sol, c)
    return out


def greedy_solve(instance, model: LehdModel, seed=0, starts: int = 1):
    """``(solution, cost)`` of greedy construction."""
    return _greedy_chunk([instance], model, [np.random.default_rng(seed)], starts)[0]


# --------------------------------------------------------------------------- chunked driver

@dataclass
class ChunkResult:
    index: int
    initial: list          # (solution, cost) per instance
    final: list            # (solution, cost) per instance after all iterations
    traces: list
    snaps: dict
    seconds_initial: float
    seconds_iter: dict     # k -> seconds for the first k iterations


def _run_chunk(instances, indices, model, seed, starts, init, iters, snapshots, reconstruct=None):
    rngs = [np.random.default_rng([seed, i]) for i in indices]
    t0 = time.monotonic()
    if init is None or init == "greedy":
        initial = _greedy_chunk(instances, model, rngs, starts)
    elif init == "nn":
        initial = [(s, solution_cost(i, s)) for i, s in
                   zip(instances, (nearest_neighbor(i) for i in instances))]
    else:
        initial = [(s, solution_cost(i, s)) for i, s in zip(instances, init)]
    t1 = time.monotonic()
    seconds_iter = {}
    recon = reconstruct if reconstruct is not None else ModelReconstructor(model)
    sols, costs, snaps = [s for s, _ in initial], [c for _, c in initial], {}
    done = 0
    traces = [RrcTrace(c) for c in costs]
    for k in sorted(set(snapshots) | {iters}):
        if k == 0:
            snaps[0] = list(zip(sols, costs))
            seconds_iter[0] = 0.0
            continue
        sols, costs, tr, _ = rrc_batch(instances, sols, recon, k - done, rngs)
        for t_all, t_new in zip(traces, tr):
            for e in t_new.entries:
                e.iteration += done
            t_all.entries.extend(t_new.entries)
        done = k
        snaps[k] = list(zip(sols, costs))
        seconds_iter[k] = time.monotonic() - t1
    return ChunkResult(indices[0] if indices else 0, initial, list(zip(sols, costs)), traces,
                       snaps, t1 - t0, seconds_iter)


_WORKER: dict = {}


def _worker_init(model, seed, starts, init, iters, snapshots):
    _WORKER.update(model=model, seed=seed, starts=starts, init=init, iters=iters, snapshots=snapshots)


def _worker_run(args):
    instances, indices, init = args
    w = _WORKER
    return _run_chunk(instances, indices, w["model"], w["seed"], w["starts"],
                      init if init is not None else w["init"], w["iters"], w["snapshots"])


def run_chunks(instances: Sequence, model: LehdModel, *, seed=0, starts=1, init=None, iters=0,
               snapshots: Sequence[int] = (), workers: int = 1, reconstruct=None,
               log: Callable[[str], None] | None = None) -> list[ChunkResult]:
    """Solve (and optionally improve) ``instances`` chunk by chunk."""
    log = log or (lambda msg: None)
    jobs = []
    for lo in range(0, len(instances), CHUNK):
        idx = list(range(lo, min(lo + CHUNK, len(instances))))
        chunk_init = init[lo:lo + CHUNK] if isinstance(init, (list, tuple)) else None
        jobs.append(([instances[i] for i in idx], idx, chunk_init))
    base_init = init if not isinstance(init, (list, tuple)) else None
    results = []
    if workers > 1 and len(jobs) > 1 and reconstruct is None:
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, _worker_init, (model, seed, starts, base_init, iters, tuple(snapshots))) as pool:
            for k, res in enumerate(pool.imap(_worker_run, jobs)):
                results.append(res)
                log(f"chunk {k + 1}/{len(jobs)} done")
    else:
        for k, (chunk, idx, ci) in enumerate(jobs):
            results.append(_run_chunk(chunk, idx, model, seed, starts,
                                      ci if ci is not None else base_init, iters, snapshots, reconstruct))
            log(f"chunk {k + 1}/{len(jobs)} done")
    return results


def solve_many(instances: Sequence, model: LehdModel, iters: int = 0, seed=0, starts: int = 1,
               init=None, workers: int = 1, log=None, traces: bool = False):
    """Greedy (or given) initial solutions improved by ``iters`` RRC rounds.

    Returns a list of ``(solution, cost)``, plus the traces when requested.
    """
    res = run_chunks(instances, model, seed=seed, starts=starts, init=init, iters=iters,
                     workers=workers, log=log)
    final = [x for r in res for x in r.final]
    if traces:
        return final, [t for r in res for t in r.traces]
    return final


# --------------------------------------------------------------------------- bench

BENCH_COLUMNS = ("instance_id", "n", "method", "cost", "reference", "gap", "seconds", "flag")


def parse_budgets(spec: str) -> list[tuple[str, int]]:
    """``"greedy,rrc50,rrc100"`` -> ``[("greedy", 0), ("rrc50", 50), ("rrc100", 100)]``;
    ``nn`` adds the nearest-neighbor baseline."""
    out = []
    for tok in (t.strip() for t in spec.split(",")):
        if not tok:
            continue
        if tok in ("greedy", "nn"):
            out.append((tok, 0))
        elif tok.startswith("rrc") and tok[3:].isdigit():
            out.append((tok, int(tok[3:])))
        else:
            raise ValueError(f"unknown budget {tok!r} (use greedy, nn or rrcN)")
    if not out:
        raise ValueError("no budgets given")
    return out


def _fmt(x, digits=6):
    return "" if x is None else f"{x:.{digits}f}"


def bench(instances: Sequence, model: LehdModel, budgets: Sequence[tuple[str, int]],
          references: Sequence[float | None], *, ids=None, scales=None, seed=0, starts=1,
          workers=1, timing=True, log=None) -> str:
    """Result table as CSV text: one row per (instance, method) then one
    aggregate row per method (mean cost, mean gap, total seconds)."""
    n_inst = len(instances)
    ids = list(ids) if ids is not None else [str(i) for i in range(n_inst)]
    scales = list(scales) if scales is not None else [1.0] * n_inst
    rows = {name: [None] * n_inst for name, _ in budgets}
    model_budgets = [(nm, k) for nm, k in budgets if nm != "nn"]
    if model_budgets and n_inst:
        max_iters = max(k for _, k in model_budgets)
        res = run_chunks(instances, model, seed=seed, starts=starts, iters=max_iters,
                         snapshots=[k for _, k in model_budgets], workers=workers, log=log)
        for r in res:
            per = 1.0 / len(r.initial)
            for j, (_, c0) in enumerate(r.initial):
                i = r.index + j
                for nm, k in model_budgets:
                    cost = c0 if k == 0 else r.snaps[k][j][1]
                    secs = (r.seconds_initial + r.seconds_iter.get(k, 0.0)) * per
                    rows[nm][i] = (cost, secs)
    if any(nm == "nn" for nm, _ in budgets):
        for i, inst in enumerate(instances):
            t0 = time.monotonic()
            c = solution_cost(inst, nearest_neighbor(inst))
            rows["nn"][i] = (c, time.monotonic() - t0)

    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(BENCH_COLUMNS)
    agg = {nm: [[], [], 0.0] for nm, _ in budgets}
    for i, inst in enumerate(instances):
        ref = references[i]
        for nm, _ in budgets:
            c, secs = rows[nm][i]
            c *= scales[i]
            g, flag = None, ""
            if ref is None:
                flag = "missing_reference"
            else:
                g = gap(c, ref)
                agg[nm][1].append(g)
            agg[nm][0].append(c)
            agg[nm][2] += secs
            wr.writerow([ids[i], inst.n, nm, _fmt(c), _fmt(ref), _fmt(g, 4),
                         f"{secs:.3f}" if timing else "", flag])
    for nm, _ in budgets:
        costs, gaps, secs = agg[nm]
        if not costs:
            continue
        wr.writerow(["mean", "", nm, _fmt(float(np.mean(costs))), "",
                     _fmt(float(np.mean(gaps)), 4) if gaps else "",
                     f"{secs:.3f}" if timing else "", "aggregate"])
    return buf.getvalue()
