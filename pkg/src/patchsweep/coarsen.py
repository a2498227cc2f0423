"""Coarsened sweep graphs built from recorded vertex clusters.

The first sweep runs on the fine DAG and every program records the clusters it
solved. Each cluster becomes a coarse vertex; fine edges between clusters are
merged into coarse edges. Later sweeps schedule whole clusters instead of
single vertices, replaying each cluster in its recorded order.
"""

from __future__ import annotations

import heapq
import itertools
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .mesh import Decomposition
from .patchprog import (
    STREAM_CG,
    UNLIMITED,
    Kernel,
    PatchProgram,
    ProgramTimers,
    ProtocolError,
    Stream,
)
from .sweepgraph import AngleGraph


class IncompleteTraceError(ValueError):
    pass


class CoarseningInvariantError(AssertionError):
    """A coarsened graph built from a legal trace turned out cyclic."""


class StaleGraphError(RuntimeError):
    pass


@dataclass(frozen=True)
class CoarseVertex:
    cv_id: int
    patch: int
    task: int
    cells: tuple[int, ...]
    seq: int


@dataclass(frozen=True)
class CoarseEdge:
    src: int
    tgt: int
    sources: tuple[int, ...]
    targets: tuple[int, ...]

    @property
    def pairs(self):
        return list(zip(self.sources, self.targets))


@dataclass
class CoarsenedGraph:
    angle: int
    cvertices: list[CoarseVertex]
    cedges: list[CoarseEdge]
    cv_of_cell: list[int]
    in_degree: list[int]
    succ: list[list[int]] = field(repr=False)  # cv -> indices into cedges
    fingerprint: tuple = ()
    intra_edges: int = 0

    def edge(self, src: int, tgt: int) -> CoarseEdge:
        for ei in self.succ[src]:
            if self.cedges[ei].tgt == tgt:
                return self.cedges[ei]
        raise KeyError((src, tgt))

    def local_cvs(self, patch: int) -> list[int]:
        return [cv.cv_id for cv in self.cvertices if cv.patch == patch]


def graph_fingerprint(decomp: Decomposition, graph: AngleGraph) -> tuple:
    return (
        decomp.mesh.n_cells,
        graph.angle,
        graph.omega,
        hash(decomp.patch_of_cell),
        hash(graph.downwind),
    )


def build_coarsened_graph(
    traces: dict[int, list[tuple[int, tuple[int, ...]]]],
    graph: AngleGraph,
    fingerprint: tuple = (),
) -> CoarsenedGraph:
    """One coarse vertex per recorded cluster, ordered by (patch, sequence id).

    ``traces`` maps patch id to that program's ``(seq, cells)`` records.
    """
    records = sorted((patch, seq, tuple(cells)) for patch, recs in traces.items() for seq, cells in recs)
    cv_of_cell = [-1] * graph.n_cells
    position = [0] * graph.n_cells
    cvertices = []
    for cv_id, (patch, seq, cells) in enumerate(records):
        for pos, c in enumerate(cells):
            if cv_of_cell[c] != -1:
                raise IncompleteTraceError(f"cell {c} recorded in two clusters")
            cv_of_cell[c] = cv_id
            position[c] = pos
        cvertices.append(CoarseVertex(cv_id, patch, graph.angle, cells, seq))
    missing = [c for c, cv in enumerate(cv_of_cell) if cv == -1]
    if missing:
        raise IncompleteTraceError(f"trace misses {len(missing)} cells, first {missing[:10]}")

    pairs: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    intra = 0
    for u, v in graph.edges():
        a, b = cv_of_cell[u], cv_of_cell[v]
        if a == b:
            intra += 1
            continue
        pairs.setdefault((a, b), []).append((position[u], u, v))
    cedges = []
    succ: list[list[int]] = [[] for _ in cvertices]
    in_degree = [0] * len(cvertices)
    for (a, b) in sorted(pairs):
        fine = sorted(pairs[(a, b)])
        cedges.append(CoarseEdge(a, b, tuple(u for _, u, _ in fine), tuple(v for _, _, v in fine)))
        succ[a].append(len(cedges) - 1)
        in_degree[b] += 1
    return CoarsenedGraph(
        angle=graph.angle,
        cvertices=cvertices,
        cedges=cedges,
        cv_of_cell=cv_of_cell,
        in_degree=in_degree,
        succ=succ,
        fingerprint=fingerprint,
        intra_edges=intra,
    )


def _find_cycle(cg: CoarsenedGraph, nodes: set[int]) -> list[int]:
    start = min(nodes)
    seen: dict[int, int] = {}
    path = []
    v = start
    while v not in seen:
        seen[v] = len(path)
        path.append(v)
        v = next(cg.cedges[ei].tgt for ei in cg.succ[v] if cg.cedges[ei].tgt in nodes)
    return path[seen[v]:]


def verify_acyclic(cg: CoarsenedGraph) -> None:
    deg = list(cg.in_degree)
    queue = deque(i for i, d in enumerate(deg) if d == 0)
    seen = 0
    while queue:
        v = queue.popleft()
        seen += 1
        for ei in cg.succ[v]:
            w = cg.cedges[ei].tgt
            deg[w] -= 1
            if deg[w] == 0:
                queue.append(w)
    if seen != len(cg.cvertices):
        residual = {i for i, d in enumerate(deg) if d > 0}
        cycle = _find_cycle(cg, residual)
        raise CoarseningInvariantError(f"coarsened graph of angle {cg.angle} has cycle {cycle}")


def cg_to_dot(cg: CoarsenedGraph) -> str:
    lines = [f'digraph "cg_angle{cg.angle}" {{']
    for cv in cg.cvertices:
        label = ",".join(map(str, cv.cells))
        lines.append(f'  cv{cv.cv_id} [label="cv{cv.cv_id} p{cv.patch}: {label}"];')
    for ce in cg.cedges:
        label = " ".join(f"{u}->{v}" for u, v in ce.pairs)
        lines.append(f'  cv{ce.src} -> cv{ce.tgt} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


class CoarseSweepProgram(PatchProgram):
    """Sweep of one (patch, angle) over its coarse vertices.

    Ready coarse vertices are taken in recorded order; a compute call keeps
    taking them while the collected fine-vertex count is below ``grain``.
    """

    def __init__(
        self,
        cg: CoarsenedGraph,
        patch: int,
        kernel: Kernel,
        grain: int = UNLIMITED,
        clock: Callable[[], int] = time.perf_counter_ns,
    ):
        super().__init__(patch, cg.angle)
        self.cg = cg
        self.kernel = kernel
        self.grain = grain
        self.clock = clock
        self.timers = ProgramTimers()
        self.local = cg.local_cvs(patch)
        self.n_fine = sum(len(cg.cvertices[i].cells) for i in self.local)
        self.counts: dict[int, int] = {}
        self.queue: list[tuple[int, int]] = []
        self.outstreams: dict[tuple[int, int], Stream] = {}
        self.values: dict[int, float] = {}
        self.received: set[tuple[int, int]] = set()
        self.computed_count = 0
        self.scheduled_units = 0
        self.compute_invocations = 0

    def __len__(self):
        return self.n_fine

    @property
    def remaining(self) -> int:
        return self.n_fine - self.computed_count

    def _enqueue(self, cv: int) -> None:
        heapq.heappush(self.queue, (self.cg.cvertices[cv].seq, cv))

    def init(self) -> None:
        if self.state.initialized:
            raise ProtocolError(f"program {self.pid} initialized twice")
        self.counts = {cv: self.cg.in_degree[cv] for cv in self.local}
        for cv in self.local:
            if self.counts[cv] == 0:
                self._enqueue(cv)
        self.state.initialized = True

    def input(self, stream: Stream) -> None:
        if stream.target != self.pid or stream.kind != STREAM_CG:
            raise ProtocolError(f"stream for {stream.target} delivered to coarse program {self.pid}")
        t0 = self.clock()
        cv_of = self.cg.cv_of_cell
        in_this: set[tuple[int, int]] = set()
        for u, v, value in stream.payload:
            self.values[u] = value
            key = (cv_of[u], cv_of[v])
            if key in in_this:
                continue
            if key in self.received:
                raise ProtocolError(f"coarse edge {key} delivered twice to {self.pid}")
            in_this.add(key)
            self.received.add(key)
            n = self.counts.get(key[1])
            if n is None or n <= 0:
                raise ProtocolError(f"unexpected coarse edge {key} at {self.pid}")
            self.counts[key[1]] = n - 1
            if n == 1:
                self._enqueue(key[1])
        self.timers.pack_unpack_ns += self.clock() - t0

    def compute(self) -> list[int]:
        if not self.queue:
            return []
        t0 = self.clock()
        saved_queue = list(self.queue)
        decremented = []
        cells: list[int] = []
        remote = []
        cg = self.cg
        me = self.pid.patch
        n_units = 0
        while self.queue and len(cells) < self.grain:
            _, cv = heapq.heappop(self.queue)
            n_units += 1
            cells.extend(cg.cvertices[cv].cells)
            for ei in cg.succ[cv]:
                ce = cg.cedges[ei]
                if cg.cvertices[ce.tgt].patch == me:
                    self.counts[ce.tgt] -= 1
                    decremented.append(ce.tgt)
                    if self.counts[ce.tgt] == 0:
                        self._enqueue(ce.tgt)
                else:
                    remote.append(ce)
        t1 = self.clock()
        try:
            self.kernel(self.pid.task, cells, self.values)
        except Exception:
            for cv in decremented:
                self.counts[cv] += 1
            self.queue = saved_queue
            raise
        t2 = self.clock()
        task = self.pid.task
        for ce in remote:
            tgt_patch = cg.cvertices[ce.tgt].patch
            key = (tgt_patch, task)
            s = self.outstreams.get(key)
            if s is None:
                s = self.outstreams[key] = Stream(me, task, tgt_patch, task, kind=STREAM_CG)
            for u, v in zip(ce.sources, ce.targets):
                s.write(u, v, self.values[u])
        t3 = self.clock()
        self.computed_count += len(cells)
        self.scheduled_units += n_units
        self.compute_invocations += 1
        self.timers.graph_op_ns += (t1 - t0) + (self.clock() - t3)
        self.timers.kernel_ns += t2 - t1
        self.timers.pack_unpack_ns += t3 - t2
        return cells

    def output(self) -> Stream | None:
        if not self.outstreams:
            return None
        return self.outstreams.pop(next(iter(self.outstreams)))

    def vote_to_halt(self) -> bool:
        return not self.queue


def sweep_on_cg(runtime, kernel):
    """Run one sweep over the runtime's cached coarsened graphs."""
    return runtime.sweep(kernel, coarse=True)


def record_sequence() -> Callable[[], int]:
    return itertools.count().__next__
