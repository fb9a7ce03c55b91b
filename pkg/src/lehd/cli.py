"""``lehd`` command line: generate, label, train, solve, improve, benchmark,
parse library files and plot solutions.

Data goes to the files named by the flags (or stdout for ``-``); progress
goes to stderr.  Failures print one JSON line on stderr and exit with::

    1  other error          3  input file not found
    2  bad usage / flags    4  schema or format error in an input file
"""
from __future__ import annotations

import argparse
import json
import multiprocessing as mp
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DatasetError, LabeledInstance, read_dataset, read_instances, read_manifest,
                   write_dataset)
from .infer import bench, parse_budgets, run_chunks
from .libio import LibFormatError, ingest
from .model import LehdModel
from .oracles import TooLarge, exact_cvrp, held_karp_tsp, nearest_neighbor
from .plot import write_svg
from .routing import SchemaError, generate_cvrp, generate_tsp, solution_cost, to_record
from .train import CONFIG_KEYS, load_config, self_improve, train

EXIT_OTHER, EXIT_USAGE, EXIT_MISSING, EXIT_SCHEMA = 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, msg: str):
        self.code, self.kind = code, kind
        super().__init__(msg)


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", f"{self.prog}: {message}")


def progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _input(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING, "missing_file", f"no such file: {path}")
    return p


def _load_instances(path):
    items = list(read_instances(_input(path)))
    return [i for i, _, _ in items], [s for _, s, _ in items], [r for _, _, r in items]


def _load_model(path, kind=None) -> LehdModel:
    try:
        model = LehdModel.load(_input(path))
    except (ValueError, KeyError) as e:
        raise CliError(EXIT_SCHEMA, "schema", f"{path}: {e}") from None
    if kind is not None and model.config.problem != kind:
        raise CliError(EXIT_SCHEMA, "schema",
                       f"{path}: model solves {model.config.problem}, data is {kind}")
    return model


def _one_kind(instances) -> str | None:
    kinds = {i.kind for i in instances}
    if len(kinds) > 1:
        raise CliError(EXIT_SCHEMA, "schema", "input mixes TSP and CVRP records")
    return kinds.pop() if kinds else None


def _write_solutions(path, instances, results, manifest):
    recs = (to_record(inst, sol, cost=cost) for inst, (sol, cost) in zip(instances, results))
    write_dataset(path, recs, manifest)


def _parent_seed(path):
    m = read_manifest(path)
    return None if m is None else m.get("seed")


# --------------------------------------------------------------------------- subcommands

def cmd_gen(a):
    if a.count < 0:
        raise CliError(EXIT_USAGE, "usage", "--count must be >= 0")
    insts = []
    for i in range(a.count):
        g = np.random.default_rng([a.seed, i])
        insts.append(generate_tsp(a.n, g) if a.problem == "tsp" else generate_cvrp(a.n, a.capacity, g))
    write_dataset(a.out, insts, {"command": "gen", "problem": a.problem, "n": a.n, "count": a.count,
                                 "seed": a.seed, "capacity": a.capacity,
                                 "seed_splitting": "instance i uses default_rng([seed, i])"})
    progress(f"wrote {a.count} {a.problem} instances to {a.out}")


def _label_one(args):
    solver, inst = args
    if solver == "held-karp":
        return held_karp_tsp(inst)[0]
    if solver == "exact-cvrp":
        return exact_cvrp(inst)[0]
    return nearest_neighbor(inst)


def cmd_label(a):
    insts, _, _ = _load_instances(a.inp)
    kind = _one_kind(insts)
    need = {"held-karp": "tsp", "exact-cvrp": "cvrp"}.get(a.solver)
    if need and kind and kind != need:
        raise CliError(EXIT_SCHEMA, "schema", f"solver {a.solver} needs {need} instances, got {kind}")
    jobs = [(a.solver, i) for i in insts]
    try:
        if a.workers > 1:
            with mp.get_context("fork").Pool(a.workers) as pool:
                sols = pool.map(_label_one, jobs, chunksize=64)
        else:
            sols = [_label_one(j) for j in jobs]
    except TooLarge as e:
        raise CliError(EXIT_USAGE, "too_large", str(e)) from None
    source = "heuristic" if a.solver == "nn" else "exact"
    items = [LabeledInstance(i, s, source) for i, s in zip(insts, sols)]
    write_dataset(a.out, items, {"command": "label", "solver": a.solver, "label_source": source,
                                 "input": str(a.inp), "seed": _parent_seed(a.inp)})
    progress(f"labeled {len(items)} instances with {a.solver}")


def cmd_train(a):
    try:
        mcfg, tcfg, raw = load_config(_input(a.config))
    except (ValueError, TypeError) as e:
        if isinstance(e, CliError):
            raise
        raise CliError(EXIT_SCHEMA, "schema", str(e)) from None
    for key in ("epochs", "lr", "seed", "batch_size", "decay"):
        v = getattr(a, key)
        if v is not None:
            setattr(tcfg, key, v)
    data = list(read_dataset(_input(a.data)))
    if not data:
        raise CliError(EXIT_SCHEMA, "schema", f"{a.data}: no records")
    kind = _one_kind([d.instance for d in data])
    init = a.init or raw.get("init")
    if init:
        model = _load_model(init, kind)
    else:
        if mcfg.problem != kind:
            raise CliError(EXIT_SCHEMA, "schema", f"config problem {mcfg.problem} but data is {kind}")
        model = LehdModel.initialize(mcfg, tcfg.seed)
    out = Path(a.out)
    res = train(data, model, tcfg, out, log=progress)
    model.save(out / "final.ckpt", train_config=asdict(tcfg))
    (out / "manifest.json").write_text(json.dumps(
        {"command": "train", "data": str(a.data), "seed": tcfg.seed, "model_config": model.config.to_dict(),
         "train_config": asdict(tcfg), "init": init, "checkpoints": [p.name for p in res.checkpoints]},
        indent=2, sort_keys=True) + "\n")


def cmd_solve(a):
    if a.mode != "greedy":
        raise CliError(EXIT_USAGE, "usage", "only --mode greedy is supported")
    insts, _, _ = _load_instances(a.inp)
    model = _load_model(a.model, _one_kind(insts))
    res = run_chunks(insts, model, seed=a.seed, starts=a.starts, workers=a.workers, log=progress)
    final = [x for r in res for x in r.final]
    _write_solutions(a.out, insts, final, {"command": "solve", "seed": a.seed, "starts": a.starts,
                                           "model": str(a.model), "input": str(a.inp)})


def _init_solutions(spec, insts):
    if spec in ("greedy", "nn"):
        return spec
    _, sols, _ = _load_instances(spec)
    if len(sols) != len(insts) or any(s is None for s in sols):
        raise CliError(EXIT_SCHEMA, "schema", f"{spec}: needs one solution per input instance")
    return sols


def cmd_rrc(a):
    insts, _, _ = _load_instances(a.inp)
    model = _load_model(a.model, _one_kind(insts))
    if a.iters < 0:
        raise CliError(EXIT_USAGE, "usage", "--iters must be >= 0")
    init = _init_solutions(a.init, insts)
    res = run_chunks(insts, model, seed=a.seed, starts=a.starts, init=init, iters=a.iters,
                     workers=a.workers, log=progress)
    final = [x for r in res for x in r.final]
    _write_solutions(a.out, insts, final, {"command": "rrc", "seed": a.seed, "iters": a.iters,
                                           "init": str(a.init), "starts": a.starts,
                                           "model": str(a.model), "input": str(a.inp)})
    if a.trace:
        with open(a.trace, "w") as fh:
            for k, tr in enumerate(t for r in res for t in r.traces):
                fh.write(json.dumps({"instance": k, "initial_cost": tr.initial_cost,
                                     "entries": tr.to_rows()}) + "\n")


def cmd_self_improve(a):
    insts, _, _ = _load_instances(a.inp)
    model = _load_model(a.model, _one_kind(insts))
    items = self_improve(insts, model, a.iters, seed=a.seed, log=progress)
    write_dataset(a.out, items, {"command": "self-improve", "seed": a.seed, "iters": a.iters,
                                 "label_source": "self_improved", "model": str(a.model)})


def _references(spec, insts, recs):
    if spec == "none":
        return [None] * len(insts)
    if spec == "oracle":
        refs = []
        for inst in insts:
            try:
                refs.append(held_karp_tsp(inst)[1] if inst.kind == "tsp" else exact_cvrp(inst)[1])
            except TooLarge:
                refs.append(None)
        return refs
    refs = list(_ref_records(spec))
    if len(refs) != len(insts):
        raise CliError(EXIT_SCHEMA, "schema", f"{spec}: {len(refs)} references for {len(insts)} instances")
    return refs


def _ref_records(path):
    for inst, sol, rec in read_instances(_input(path)):
        if "cost" in rec and rec["cost"] is not None:
            yield float(rec["cost"])
        elif sol is not None:
            scale = (rec.get("provenance") or {}).get("scale", 1.0)
            yield solution_cost(inst, sol) * scale
        else:
            yield None


def cmd_bench(a):
    insts, _, recs = _load_instances(a.inp)
    model = _load_model(a.model, _one_kind(insts))
    try:
        budgets = parse_budgets(a.budgets)
    except ValueError as e:
        raise CliError(EXIT_USAGE, "usage", str(e)) from None
    refs = _references(a.ref, insts, recs)
    ids = [str(r.get("id", k)) for k, r in enumerate(recs)]
    scales = [(r.get("provenance") or {}).get("scale", 1.0) for r in recs]
    table = bench(insts, model, budgets, refs, ids=ids, scales=scales, seed=a.seed, starts=a.starts,
                  workers=a.workers, timing=not a.no_timing, log=progress)
    if a.out == "-":
        sys.stdout.write(table)
    else:
        Path(a.out).write_text(table)


def cmd_parse(a):
    p = _input(a.inp)
    inst, prov = ingest(p.read_text(), a.format, source=p.name)
    rec = to_record(inst, id=prov["name"] or p.stem, provenance=prov)
    write_dataset(a.out, [rec])
    progress(f"parsed {prov['name'] or p.name}: n={inst.n}, scale={prov['scale']}")


def cmd_plot(a):
    insts, sols, recs = _load_instances(a.solution)
    out = Path(a.out)
    if len(insts) == 1:
        targets = [out]
    else:
        targets = [out.with_name(f"{out.stem}_{k}{out.suffix or '.svg'}") for k in range(len(insts))]
    for inst, sol, rec, path in zip(insts, sols, recs, targets):
        title = str(rec.get("id", ""))
        if sol is not None:
            title = f"{title} cost {solution_cost(inst, sol):.4f}".strip()
        write_svg(path, inst, sol, title)
    progress(f"wrote {len(targets)} SVG file(s)")


# --------------------------------------------------------------------------- parser

def build_parser() -> Parser:
    p = Parser(prog="lehd", description="Light-encoder/heavy-decoder routing solver toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def workers(sp):
        sp.add_argument("--workers", type=int, default=1, help="parallel worker processes (default 1)")

    def seed(sp):
        sp.add_argument("--seed", type=int, default=0, help="root random seed (default 0)")

    s = sub.add_parser("gen", help="generate random instances")
    s.add_argument("--problem", choices=["tsp", "cvrp"], required=True, help="problem kind")
    s.add_argument("--n", type=int, required=True, help="nodes (TSP) or customers (CVRP)")
    s.add_argument("--count", type=int, required=True, help="number of instances")
    s.add_argument("--capacity", type=int, default=None,
                   help="CVRP vehicle capacity (default: size table, 30 for n<=20, 40 for n<=50)")
    seed(s)
    s.add_argument("--out", required=True, help="output JSON-lines file")
    s.set_defaults(fn=cmd_gen)

    s = sub.add_parser("label", help="attach reference solutions")
    s.add_argument("--in", dest="inp", required=True, help="input instances (JSON lines)")
    s.add_argument("--solver", choices=["held-karp", "exact-cvrp", "nn"], required=True,
                   help="exact TSP (n<=16), exact CVRP (n<=8) or nearest neighbor")
    s.add_argument("--out", required=True, help="output labeled dataset")
    workers(s)
    s.set_defaults(fn=cmd_label)

    s = sub.add_parser("train", help="supervised training on sampled partial solutions")
    s.add_argument("--data", required=True, help="labeled dataset (JSON lines)")
    s.add_argument("--config", required=True,
                   help="JSON config; keys: " + ", ".join(CONFIG_KEYS))
    s.add_argument("--out", required=True, help="output directory for checkpoints and metrics.csv")
    s.add_argument("--init", default=None, help="start from this checkpoint instead of random weights")
    s.add_argument("--epochs", type=int, default=None, help="override config epochs")
    s.add_argument("--lr", type=float, default=None, help="override initial learning rate")
    s.add_argument("--decay", type=float, default=None, help="override per-epoch learning-rate decay")
    s.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="override batch size")
    s.add_argument("--seed", type=int, default=None, help="override config seed")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("solve", help="greedy construction with a trained model")
    s.add_argument("--model", required=True, help="model checkpoint")
    s.add_argument("--in", dest="inp", required=True, help="input instances")
    s.add_argument("--mode", default="greedy", choices=["greedy"], help="construction mode")
    s.add_argument("--starts", type=int, default=1, help="TSP: best of K random first nodes (default 1)")
    seed(s)
    s.add_argument("--out", required=True, help="output solutions (JSON lines)")
    workers(s)
    s.set_defaults(fn=cmd_solve)

    s = sub.add_parser("rrc", help="random re-construction improvement")
    s.add_argument("--model", required=True, help="model checkpoint")
    s.add_argument("--in", dest="inp", required=True, help="input instances")
    s.add_argument("--init", default="greedy", help="initial solutions: greedy, nn or a solutions file")
    s.add_argument("--iters", type=int, required=True, help="re-construction iterations (attempted)")
    s.add_argument("--starts", type=int, default=1, help="greedy init: best of K first nodes")
    seed(s)
    s.add_argument("--out", required=True, help="output solutions")
    s.add_argument("--trace", default=None, help="optional per-iteration trace (JSON lines)")
    workers(s)
    s.set_defaults(fn=cmd_rrc)

    s = sub.add_parser("self-improve", help="label instances with the model's own improved solutions")
    s.add_argument("--model", required=True, help="model checkpoint")
    s.add_argument("--in", dest="inp", required=True, help="input instances")
    s.add_argument("--iters", type=int, required=True, help="re-construction iterations per instance")
    seed(s)
    s.add_argument("--out", required=True, help="output labeled dataset")
    s.set_defaults(fn=cmd_self_improve)

    s = sub.add_parser("bench", help="result table: cost, gap and time per method")
    s.add_argument("--model", required=True, help="model checkpoint")
    s.add_argument("--in", dest="inp", required=True, help="input instances")
    s.add_argument("--ref", "--ref-file", dest="ref", default="oracle",
                   help="reference costs: oracle (exact solvers), none, or a JSON-lines file")
    s.add_argument("--budgets", default="greedy,rrc50,rrc100",
                   help="comma list of greedy, nn, rrcN (default greedy,rrc50,rrc100)")
    s.add_argument("--starts", type=int, default=1, help="greedy: best of K first nodes")
    seed(s)
    s.add_argument("--no-timing", dest="no_timing", action="store_true",
                   help="leave the seconds column blank (byte-reproducible output)")
    s.add_argument("--out", required=True, help="output CSV, or - for stdout")
    workers(s)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("parse", help="convert a TSPLib/CVRPLib file to a normalized record")
    s.add_argument("--format", choices=["tsplib", "cvrplib"], required=True, help="input format")
    s.add_argument("--in", dest="inp", required=True, help="input .tsp/.vrp file")
    s.add_argument("--out", required=True, help="output JSON-lines file")
    s.set_defaults(fn=cmd_parse)

    s = sub.add_parser("plot", help="SVG plot of solutions")
    s.add_argument("--solution", required=True, help="solutions file (JSON lines)")
    s.add_argument("--out", required=True, help="output SVG (numbered when the file has several records)")
    s.set_defaults(fn=cmd_plot)
    return p


def _fail(code, kind, msg):
    print(json.dumps({"error": kind, "message": msg, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise CliError(EXIT_USAGE, "usage", "--workers must be >= 1")
        args.fn(args)
    except CliError as e:
        return _fail(e.code, e.kind, str(e))
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING, "missing_file", str(e))
    except (DatasetError, SchemaError, LibFormatError, json.JSONDecodeError) as e:
        return _fail(EXIT_SCHEMA, "schema", str(e))
    except (ValueError, RuntimeError, OSError) as e:
        return _fail(EXIT_OTHER, type(e).__name__, str(e))
    return 0


if __name__ == "__main__":
    sys.exit(main())
