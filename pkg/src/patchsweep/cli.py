"""Command-line front end: ``patchsweep run | verify | bench | toy-mesh``."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import mesh as meshmod
from .coarsen import StaleGraphError
from .mesh import MeshError, StructuredMeshSpec
from .patchprog import UNLIMITED, KernelRecorder, ProtocolError
from .runtime import DeadlockError, Runtime, RuntimeConfig, SweepProblem, RoutingError
from .solver import (
    CrossSectionError,
    CrossSections,
    DegenerateCellError,
    TransportKernel,
    first_divergence,
    oracle_source_iteration,
    oracle_sweep_fields,
    source_iteration,
)
from .sweepgraph import CycleError, Strategy

log = logging.getLogger("patchsweep")

MAX_VERIFY_VERTICES = 10**6
BENCH_AXES = ("grain", "patch", "strategy", "workers")
_ERRORS = (
    MeshError,
    CycleError,
    CrossSectionError,
    DegenerateCellError,
    DeadlockError,
    ProtocolError,
    RoutingError,
    StaleGraphError,
    ValueError,
    OSError,
)


def _triple(text: str, kind=int) -> tuple:
    parts = [kind(x) for x in text.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 comma-separated values, got {text!r}")
    return tuple(parts)


def _grain(text: str) -> int:
    if text.lower() in ("inf", "unlimited", "max"):
        return UNLIMITED
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("grain must be >= 1")
    return n


def add_spec_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dims", type=_triple, help="structured mesh cells per axis, e.g. 8,8,8")
    src.add_argument("--mesh-file", type=Path, help="unstructured mesh JSON")
    p.add_argument("--extent", type=lambda s: _triple(s, float), default=(1.0, 1.0, 1.0), help="cell size per axis")
    p.add_argument("--patch", type=_triple, help="structured patch size in cells, e.g. 4,4,4")
    p.add_argument("--patch-cells", type=int, default=64, help="target cells per patch for unstructured meshes")
    p.add_argument("--sn", type=int, default=2, help="level-symmetric order")
    p.add_argument("--xs", type=Path, help="cross-section JSON (default: sigma_t=1, sigma_s=0.5, q=1)")
    p.add_argument("--grain", type=_grain, default=UNLIMITED)
    p.add_argument("--priority", choices=[s.value for s in Strategy], default="slbd")
    p.add_argument("--procs", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mode", choices=["dag", "cg"], default="dag")
    p.add_argument("--term", choices=["workload", "consensus"], default="workload")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latency", type=int, default=0, help="max injected transport delay in ticks (deterministic only)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded round-robin execution")
    p.add_argument("--fields-out", type=Path)
    p.add_argument("--metrics-out", type=Path)


def build_problem(args) -> tuple:
    if args.mesh_file is not None:
        mesh = meshmod.load_mesh(args.mesh_file)
        decomp = meshmod.decompose_unstructured(mesh, args.patch_cells, args.seed)
    else:
        dims = args.dims or (8, 8, 8)
        mesh = meshmod.build_structured_mesh(StructuredMeshSpec(dims, args.extent))
        decomp = meshmod.decompose_structured(mesh, args.patch or dims)
    directions = meshmod.level_symmetric_directions(args.sn)
    if args.xs is not None:
        xs = CrossSections.load(args.xs, mesh.n_cells)
    else:
        xs = CrossSections.uniform(mesh.n_cells, 1.0, 0.5, 1.0)
    return decomp, directions, xs


def build_config(args, **overrides) -> RuntimeConfig:
    kw = dict(
        processes=args.procs,
        workers=args.workers,
        grain=args.grain,
        strategy=args.priority,
        termination=args.term,
        seed=args.seed,
        mode=args.mode,
        deterministic=args.deterministic,
        max_latency=args.latency,
        drop_stream=getattr(args, "drop_stream", None),
    )
    kw.update(overrides)
    return RuntimeConfig(**kw)


def _write_json(path: Path | None, doc) -> None:
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    decomp, directions, xs = build_problem(args)
    cfg = build_config(args)
    state = source_iteration(decomp, directions, xs, cfg, tol=args.tol, max_iters=args.max_iters)
    _write_json(args.fields_out, state.to_json())
    metrics = state.metrics.to_json()
    metrics["scheduling_events_per_sweep"] = [m.scheduling_events for m in state.sweep_metrics]
    metrics["wall_seconds"] = state.wall_seconds
    _write_json(args.metrics_out, metrics)
    flag = "" if state.converged else " (not converged)"
    print(
        f"iterations={state.iterations} residual={state.residual:.3e} "
        f"wall={state.wall_seconds:.3f}s streams={metrics['streams_sent']}{flag}"
    )
    return 0


def cmd_verify(args) -> int:
    decomp, directions, xs = build_problem(args)
    n_vertices = decomp.mesh.n_cells * len(directions)
    if n_vertices > MAX_VERIFY_VERTICES:
        print(f"verify: {n_vertices} vertices exceeds the {MAX_VERIFY_VERTICES} guard", file=sys.stderr)
        return 2
    cfg = build_config(args)
    iters = args.iterations
    try:
        state = source_iteration(decomp, directions, xs, cfg, tol=args.tol, max_iters=iters)
    except DeadlockError as exc:
        # a lost stream leaves part of the field uncomputed
        ref = _oracle_first_sweep(decomp, directions, xs)
        where = first_divergence(exc.partial, ref)
        print(f"verify: FAIL runtime did not finish ({exc}); first divergence at (cell, angle)={where}")
        return 1
    ref = oracle_source_iteration(decomp.mesh, directions, xs, tol=args.tol, max_iters=state.iterations)
    where = first_divergence(state.psi, ref.psi)
    if where is None and ref.iterations == state.iterations:
        print(f"verify: OK {n_vertices} vertices, {state.iterations} iterations, bitwise equal")
        return 0
    print(f"verify: FAIL first divergence at (cell, angle)={where}")
    return 1


def _oracle_first_sweep(decomp, directions, xs) -> np.ndarray:
    problem = SweepProblem(decomp, directions)
    return oracle_sweep_fields(decomp.mesh, problem.graphs, TransportKernel(decomp.mesh, problem.graphs, xs))


def _parse_values(axis: str, text: str) -> list:
    items = text.split(";") if axis == "patch" else text.split(",")
    if axis == "grain":
        return [_grain(x) for x in items]
    if axis == "patch":
        return [_triple(x) for x in items]
    if axis == "strategy":
        return [Strategy(x).value for x in items]
    return [int(x) for x in items]


def cmd_bench(args) -> int:
    values = _parse_values(args.axis, args.values)
    rows = []
    for value in values:
        sub = argparse.Namespace(**vars(args))
        if args.axis == "grain":
            sub.grain = value
        elif args.axis == "patch":
            sub.patch = value
        elif args.axis == "strategy":
            sub.priority = value
        else:
            sub.workers = value
        decomp, directions, xs = build_problem(sub)
        cfg = build_config(sub)
        runtime = Runtime(SweepProblem(decomp, directions), cfg)
        kernel = TransportKernel(decomp.mesh, runtime.problem.graphs, xs)
        walls = []
        res = None
        for _ in range(args.sweeps):
            t0 = time.perf_counter()
            res = runtime.sweep(kernel)
            walls.append(time.perf_counter() - t0)
        m = res.metrics
        cat = {k: sum(getattr(w, k) for w in m.per_worker) for k in ("graph_op_ns", "pack_unpack_ns", "kernel_ns", "comm_ns", "idle_ns")}
        rows.append(
            {
                "axis": args.axis,
                "value": "x".join(map(str, value)) if isinstance(value, tuple) else ("inf" if value == UNLIMITED else value),
                "wall_s": f"{min(walls):.6f}",
                **cat,
                "streams": m.streams_sent,
                "bytes": m.bytes_sent,
                "activations": m.activations,
                "scheduling_events": m.scheduling_events,
                "compute_invocations": m.compute_invocations,
            }
        )
        log.info("bench %s=%s wall=%.3fs", args.axis, rows[-1]["value"], min(walls))
    out = open(args.csv_out, "w", newline="") if args.csv_out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_toy_mesh(args) -> int:
    mesh = meshmod.toy_unstructured_mesh(args.points, args.seed)
    meshmod.save_mesh(mesh, args.out)
    print(f"wrote {mesh.n_cells} cells to {args.out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchsweep", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="source iteration on the patch runtime")
    add_spec_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="compare the runtime against the sequential oracle bitwise")
    add_spec_args(p)
    p.add_argument("--iterations", type=int, default=2, help="source iterations to compare")
    p.add_argument("--drop-stream", type=int, default=None, help="fault injection: lose the k-th routed stream")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="sweep one parameter axis and emit CSV")
    add_spec_args(p)
    p.add_argument("--axis", choices=BENCH_AXES, required=True)
    p.add_argument("--values", required=True, help="comma list; patch sizes separated by ';'")
    p.add_argument("--sweeps", type=int, default=1, help="repetitions per point (best wall time kept)")
    p.add_argument("--csv-out", type=Path)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("toy-mesh", help="write a random tetrahedral ball mesh")
    p.add_argument("--points", type=int, default=160)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_toy_mesh)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"{args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
