"""Reentrant patch-programs, streams, and the sweep program.

A patch-program is identified by ``(patch, task)``; for sweeps the task is the
angle index. Programs never talk to each other directly: they consume and
produce ``Stream`` objects and leave routing to whoever drives them.
"""

from __future__ import annotations

import heapq
import itertools
import struct
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .sweepgraph import AngleGraph, PatchSubgraph

UNLIMITED = 1 << 62


class ProtocolError(RuntimeError):
    """A stream violated the sweep protocol (wrong target, duplicate delivery)."""


class Status(str, Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"


@dataclass
class ProgramState:
    status: Status = Status.ACTIVE
    initialized: bool = False

    def deactivate(self) -> None:
        self.status = Status.INACTIVE

    def activate(self) -> None:
        self.status = Status.ACTIVE


@dataclass(frozen=True, order=True)
class PatchProgramId:
    patch: int
    task: int


STREAM_DAG = 0
STREAM_CG = 1
_HEADER = struct.Struct("<BqqqqqI")
_RECORD = struct.Struct("<qqd")


@dataclass
class Stream:
    """Routable message. Payload records are ``(u_cell, v_cell, value_of_u)``."""

    src_patch: int
    src_task: int
    tgt_patch: int
    tgt_task: int
    payload: list[tuple[int, int, float]] = field(default_factory=list)
    kind: int = STREAM_DAG
    seq: int = -1

    @property
    def source(self) -> PatchProgramId:
        return PatchProgramId(self.src_patch, self.src_task)

    @property
    def target(self) -> PatchProgramId:
        return PatchProgramId(self.tgt_patch, self.tgt_task)

    def write(self, u: int, v: int, value: float) -> None:
        self.payload.append((u, v, value))

    def pack(self) -> bytes:
        head = _HEADER.pack(
            self.kind, self.seq, self.src_patch, self.src_task, self.tgt_patch, self.tgt_task, len(self.payload)
        )
        return head + b"".join(_RECORD.pack(u, v, x) for u, v, x in self.payload)

    @classmethod
    def unpack(cls, data: bytes) -> "Stream":
        kind, seq, sp, st, tp, tt, n = _HEADER.unpack_from(data, 0)
        off = _HEADER.size
        payload = [_RECORD.unpack_from(data, off + i * _RECORD.size) for i in range(n)]
        if off + n * _RECORD.size != len(data):
            raise ProtocolError("stream length does not match its record count")
        return cls(sp, st, tp, tt, payload, kind, seq)


class PatchProgram:
    """Interface every patch-program implements.

    Subclasses keep whatever local context they need across activations; the
    driver only relies on the five primitives plus ``remaining``.
    """

    def __init__(self, patch: int, task: int):
        self.pid = PatchProgramId(patch, task)
        self.state = ProgramState()

    def init(self) -> None:
        raise NotImplementedError

    def input(self, stream: Stream) -> None:
        raise NotImplementedError

    def compute(self) -> list:
        raise NotImplementedError

    def output(self) -> Stream | None:
        raise NotImplementedError

    def vote_to_halt(self) -> bool:
        raise NotImplementedError

    @property
    def remaining(self) -> int:
        raise NotImplementedError


def run_program_once(
    program: PatchProgram,
    receive: Callable[[], Stream | None],
    send: Callable[[Stream], None],
) -> bool:
    """One scheduling of ``program``: init, drain input, compute, emit, vote.

    Activation of stream targets is left to ``send``. Returns True when the
    program voted to halt (and is now INACTIVE).
    """
    if program.state.status is not Status.ACTIVE:
        raise ProtocolError(f"program {program.pid} scheduled while inactive")
    if not program.state.initialized:
        program.init()
    while (s := receive()) is not None:
        program.input(s)
    program.compute()
    while (s := program.output()) is not None:
        send(s)
    if program.vote_to_halt():
        program.state.deactivate()
        return True
    return False


# A kernel solves a cluster of cells for one angle, reading upwind values from
# and writing results into ``values``.
Kernel = Callable[[int, list, dict], None]


class KernelRecorder:
    """Counts kernel applications per (cell, angle) and stamps their order."""

    def __init__(self):
        self.counts: Counter = Counter()
        self.stamp: dict[tuple[int, int], int] = {}
        self._clock = itertools.count()

    def record(self, angle: int, cells: Iterable[int]) -> None:
        for c in cells:
            key = (c, angle)
            self.counts[key] += 1
            self.stamp[key] = next(self._clock)

    def wrap(self, kernel: Kernel) -> Kernel:
        def recorded(angle, cells, values):
            kernel(angle, cells, values)
            self.record(angle, cells)

        return recorded


@dataclass
class ProgramTimers:
    graph_op_ns: int = 0
    kernel_ns: int = 0
    pack_unpack_ns: int = 0


class SweepProgram(PatchProgram):
    """Data-driven sweep of one patch in one direction.

    Ready vertices sit in a max-priority queue (ties by ascending cell id).
    ``compute`` dequeues up to ``grain`` of them, enqueueing local downwind
    vertices as they become ready, then solves the whole cluster at once.
    Remote downwind edges are written to per-target outstreams only after the
    kernel ran, so every payload carries the fresh value.
    """

    def __init__(
        self,
        subgraph: PatchSubgraph,
        graph: AngleGraph,
        patch_of_cell,
        vertex_priority: dict[int, int],
        kernel: Kernel,
        grain: int = UNLIMITED,
        next_seq: Callable[[], int] | None = None,
        clock: Callable[[], int] = time.perf_counter_ns,
    ):
        super().__init__(subgraph.patch_id, subgraph.angle)
        if grain < 1:
            raise ValueError("clustering grain must be >= 1")
        self.subgraph = subgraph
        self.graph = graph
        self.patch_of_cell = patch_of_cell
        self.priority = vertex_priority
        self.kernel = kernel
        self.grain = grain
        self.next_seq = next_seq or itertools.count().__next__
        self.clock = clock
        self.timers = ProgramTimers()

        self.counts: dict[int, int] = {}
        self.queue: list[tuple[int, int]] = []
        self.outstreams: dict[tuple[int, int], Stream] = {}
        self.values: dict[int, float] = {}
        self.computed_count = 0
        self.cluster_trace: list[tuple[int, tuple[int, ...]]] = []
        self.compute_invocations = 0

    def __len__(self):
        return len(self.subgraph.local_vertices)

    @property
    def remaining(self) -> int:
        return len(self.subgraph.local_vertices) - self.computed_count

    @property
    def scheduled_units(self) -> int:
        return self.computed_count

    def _enqueue(self, v: int) -> None:
        heapq.heappush(self.queue, (-self.priority[v], v))

    def init(self) -> None:
        if self.state.initialized:
            raise ProtocolError(f"program {self.pid} initialized twice")
        self.queue.clear()
        self.counts = dict(self.subgraph.upwind_count)
        for v in self.subgraph.local_vertices:
            if self.counts[v] == 0:
                self._enqueue(v)
        self.state.initialized = True

    def input(self, stream: Stream) -> None:
        if stream.target != self.pid:
            raise ProtocolError(f"stream for {stream.target} delivered to {self.pid}")
        t0 = self.clock()
        for u, v, value in stream.payload:
            n = self.counts.get(v)
            if n is None:
                raise ProtocolError(f"stream edge {u}->{v} does not target patch {self.pid.patch}")
            if n <= 0:
                raise ProtocolError(f"duplicate delivery for vertex {v} in {self.pid}")
            self.values[u] = value
            self.counts[v] = n - 1
            if n == 1:
                self._enqueue(v)
        self.timers.pack_unpack_ns += self.clock() - t0

    def compute(self) -> list[int]:
        if not self.queue:
            return []
        t0 = self.clock()
        saved_queue = list(self.queue)
        decremented: list[int] = []
        cluster: list[int] = []
        remote: list[tuple[int, int]] = []
        owner = self.patch_of_cell
        me = self.pid.patch
        downwind = self.graph.downwind
        while self.queue and len(cluster) < self.grain:
            _, v = heapq.heappop(self.queue)
            cluster.append(v)
            for w in downwind[v]:
                if owner[w] == me:
                    self.counts[w] -= 1
                    decremented.append(w)
                    if self.counts[w] == 0:
                        self._enqueue(w)
                else:
                    remote.append((v, w))
        t1 = self.clock()
        try:
            self.kernel(self.pid.task, cluster, self.values)
        except Exception:
            for w in decremented:
                self.counts[w] += 1
            self.queue = saved_queue
            raise
        t2 = self.clock()
        task = self.pid.task
        for v, w in remote:
            key = (owner[w], task)
            s = self.outstreams.get(key)
            if s is None:
                s = self.outstreams[key] = Stream(me, task, owner[w], task)
            s.write(v, w, self.values[v])
        t3 = self.clock()
        self.computed_count += len(cluster)
        self.compute_invocations += 1
        self.cluster_trace.append((self.next_seq(), tuple(cluster)))
        t4 = self.clock()
        self.timers.graph_op_ns += (t1 - t0) + (t4 - t3)
        self.timers.kernel_ns += t2 - t1
        self.timers.pack_unpack_ns += t3 - t2
        return cluster

    def output(self) -> Stream | None:
        if not self.outstreams:
            return None
        key = next(iter(self.outstreams))
        return self.outstreams.pop(key)

    def vote_to_halt(self) -> bool:
        return not self.queue


@dataclass
class RoundsResult:
    rounds: int
    activations: Counter
    streams: list[Stream]


def run_rounds(programs: list[PatchProgram], max_rounds: int = 1_000_000) -> RoundsResult:
    """Reference driver: every active program runs once per round.

    Streams emitted during a round become visible at the start of the next
    one. Stops when nothing is active and nothing is in flight.
    """
    by_id = {p.pid: p for p in programs}
    inbox: dict[PatchProgramId, list[Stream]] = {pid: [] for pid in by_id}
    activations: Counter = Counter()
    sent: list[Stream] = []
    rounds = 0
    while any(p.state.status is Status.ACTIVE for p in programs):
        if rounds >= max_rounds:
            raise RuntimeError("run_rounds exceeded max_rounds")
        rounds += 1
        current = {pid: msgs for pid, msgs in inbox.items()}
        inbox = {pid: [] for pid in by_id}
        for pid in sorted(by_id):
            prog = by_id[pid]
            if prog.state.status is not Status.ACTIVE:
                continue
            pending = iter(current[pid])
            current[pid] = []
            activations[pid] += 1

            def send(s: Stream) -> None:
                if s.target not in by_id:
                    raise ProtocolError(f"stream to unknown program {s.target}")
                sent.append(s)
                inbox[s.target].append(s)

            run_program_once(prog, lambda: next(pending, None), send)
        for pid, msgs in inbox.items():
            if msgs:
                by_id[pid].state.activate()
    return RoundsResult(rounds, activations, sent)


def is_topological(stamps: dict, edges) -> bool:
    return all(stamps[u] < stamps[v] for u, v in edges)

