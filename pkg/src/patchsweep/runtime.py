"""Simulated distributed runtime for patch-programs.

Each simulated process has one master and several workers. Workers execute
patch-programs; the master routes streams, binds reactivated programs to the
lightest worker and takes part in termination detection. Streams that cross
process boundaries always travel as bytes through ``Transport``.

Two execution modes share the same step functions: a deterministic mode that
interleaves every master and worker round-robin on the calling thread, and a
threaded mode with one OS thread per master and per worker.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .coarsen import (
    CoarseSweepProgram,
    CoarsenedGraph,
    StaleGraphError,
    build_coarsened_graph,
    graph_fingerprint,
    verify_acyclic,
)
from .mesh import Decomposition, DirectionSet
from .patchprog import (
    UNLIMITED,
    Kernel,
    KernelRecorder,
    PatchProgram,
    PatchProgramId,
    ProtocolError,
    Status,
    Stream,
    SweepProgram,
    run_program_once,
)
from .sweepgraph import (
    AngleGraph,
    PatchSubgraph,
    PriorityAssignment,
    Strategy,
    build_angle_graphs,
    build_subgraphs,
    combined_priority,
    compute_patch_priority,
    compute_vertex_priority,
    make_priority_assignment,
    require_acyclic,
)

log = logging.getLogger(__name__)

UNASSIGNED = -1


class TerminationMode(str, Enum):
    WORKLOAD = "workload"
    CONSENSUS = "consensus"


class SweepMode(str, Enum):
    DAG = "dag"
    CG = "cg"


class RoutingError(KeyError):
    pass


class DeadlockError(RuntimeError):
    """No progress is possible but work remains. ``partial`` holds the fields computed so far."""

    def __init__(self, message: str, partial: np.ndarray | None = None, dump: dict | None = None):
        super().__init__(message)
        self.partial = partial
        self.dump = dump or {}


@dataclass
class RuntimeConfig:
    processes: int = 1
    workers: int = 1
    grain: int = UNLIMITED
    strategy: Strategy = Strategy.SLBD
    termination: TerminationMode = TerminationMode.WORKLOAD
    seed: int = 0
    mode: SweepMode = SweepMode.DAG
    deterministic: bool = False
    max_latency: int = 0  # ticks; deterministic mode only
    watchdog_ticks: int = 10**6
    watchdog_seconds: float = 120.0
    drop_stream: int | None = None  # fault injection: silently lose the k-th routed stream

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.termination = TerminationMode(self.termination)
        self.mode = SweepMode(self.mode)
        if self.processes < 1 or self.workers < 1:
            raise ValueError("processes and workers must be >= 1")
        if self.grain < 1:
            raise ValueError("grain must be >= 1")
        if self.max_latency < 0:
            raise ValueError("max_latency must be >= 0")
        if self.max_latency and not self.deterministic:
            raise ValueError("latency injection needs deterministic mode")


class VirtualClock:
    """Counts calls; every reading is one time unit after the previous one."""

    def __init__(self):
        self._n = itertools.count(1)

    def __call__(self) -> int:
        return next(self._n)


# ------------------------------------------------------------------ routing


class RouteTable:
    """Maps (patch, task) to (home process, bound worker)."""

    def __init__(self, patch_process: dict[int, int], tasks):
        self.patch_process = dict(patch_process)
        self._worker: dict[PatchProgramId, int] = {
            PatchProgramId(p, t): UNASSIGNED for p in self.patch_process for t in tasks
        }

    def __contains__(self, pid) -> bool:
        return pid in self._worker

    def home(self, pid: PatchProgramId) -> int:
        if pid not in self._worker:
            raise RoutingError(f"no route for program {pid}")
        return self.patch_process[pid.patch]

    def worker(self, pid: PatchProgramId) -> int:
        return self._worker[pid]

    def bind(self, pid: PatchProgramId, worker: int) -> None:
        self._worker[pid] = worker

    def unbind(self, pid: PatchProgramId) -> None:
        self._worker[pid] = UNASSIGNED


def route(stream: Stream, table: RouteTable) -> tuple[int, int]:
    """Home process of the stream's target; the worker is resolved by that master."""
    pid = stream.target
    return table.home(pid), table.worker(pid)


def round_robin_processes(n_patches: int, processes: int) -> dict[int, int]:
    return {p: p % processes for p in range(n_patches)}


class Transport:
    """Per-process inboxes of serialized streams.

    Optional seeded latency delays delivery by whole ticks while keeping every
    (source, target) channel FIFO.
    """

    def __init__(self, n: int, max_latency: int = 0, seed: int = 0):
        self.n = n
        self.max_latency = max_latency
        self._rng = random.Random(seed)
        self._inbox: list[deque] = [deque() for _ in range(n)]
        self._channel_last: dict[tuple[int, int], int] = {}
        self._lock = threading.Lock()
        self.sent = [0] * n
        self.received = [0] * n
        self.bytes_sent = [0] * n
        self._seq = itertools.count()
        self._seen: set[int] = set()
        self.wake: list[Callable[[], None] | None] = [None] * n

    def send(self, src: int, dst: int, data: bytes, now: int = 0) -> None:
        with self._lock:
            delay = self._rng.randint(0, self.max_latency) if self.max_latency else 0
            at = max(now + delay, self._channel_last.get((src, dst), 0))
            self._channel_last[(src, dst)] = at
            self._inbox[dst].append((at, next(self._seq), data))
            self.sent[src] += 1
            self.bytes_sent[src] += len(data)
        if self.wake[dst] is not None:
            self.wake[dst]()

    def receive(self, rank: int, now: int = 0) -> list[bytes]:
        out = []
        with self._lock:
            box = self._inbox[rank]
            # FIFO per channel holds because deliver-at times are monotone per channel
            keep = deque()
            while box:
                at, seq, data = box.popleft()
                if at <= now:
                    if seq in self._seen:
                        raise ProtocolError(f"transport message {seq} delivered twice")
                    self._seen.add(seq)
                    out.append(data)
                else:
                    keep.append((at, seq, data))
            self._inbox[rank] = keep
            self.received[rank] += len(out)
        return out

    def in_flight(self) -> int:
        with self._lock:
            return sum(self.sent) - sum(self.received)

    def pending(self, rank: int) -> int:
        with self._lock:
            return len(self._inbox[rank])


class SafraDetector:
    """Token-ring termination detection over message-count balances.

    Each process keeps ``sent - received``; receiving a message blackens it.
    The token travels from rank 0 down to rank n-1, ..., 1 and back to 0.
    Termination is announced when a white token returns to a white, passive
    initiator and the summed balance is zero.
    """

    def __init__(self, n: int):
        self.n = n
        self.count = [0] * n
        self.black = [False] * n
        self.holder = 0
        self.token: tuple[int, bool] | None = None
        self.terminated = False
        self.rounds = 0
        self._lock = threading.Lock()

    def on_send(self, rank: int) -> None:
        with self._lock:
            self.count[rank] += 1

    def on_receive(self, rank: int) -> None:
        with self._lock:
            self.count[rank] -= 1
            self.black[rank] = True

    def step(self, rank: int, passive: bool) -> bool:
        """Advance the token if ``rank`` holds it and is passive."""
        with self._lock:
            if self.terminated:
                return True
            if self.holder != rank or not passive:
                return False
            while True:
                if rank != 0:
                    q, dirty = self.token
                    self.token = (q + self.count[rank], dirty or self.black[rank])
                    self.black[rank] = False
                    self.holder = rank - 1
                    return False
                if self.token is not None:
                    q, dirty = self.token
                    if not dirty and not self.black[0] and q + self.count[0] == 0:
                        self.terminated = True
                        return True
                # (re)start a round
                self.rounds += 1
                self.black[0] = False
                self.token = (0, False)
                self.holder = self.n - 1
                if self.holder != 0:
                    return False


# ------------------------------------------------------------------ metrics


@dataclass
class WorkerMetrics:
    graph_op_ns: int = 0
    pack_unpack_ns: int = 0
    kernel_ns: int = 0
    comm_ns: int = 0
    idle_ns: int = 0
    wall_ns: int = 0
    runs: int = 0

    def add(self, other: "WorkerMetrics") -> None:
        for k, v in asdict(other).items():
            setattr(self, k, getattr(self, k) + v)

    def category_sum(self) -> int:
        return self.graph_op_ns + self.pack_unpack_ns + self.kernel_ns + self.comm_ns + self.idle_ns


@dataclass
class RuntimeMetrics:
    per_worker: list[WorkerMetrics] = field(default_factory=list)
    per_master: list[WorkerMetrics] = field(default_factory=list)
    streams_sent: int = 0
    streams_received: int = 0
    bytes_sent: int = 0
    local_streams: int = 0
    activations: int = 0
    iterations: int = 0
    scheduling_events: int = 0
    compute_invocations: int = 0
    ticks: int = 0

    def add(self, other: "RuntimeMetrics") -> None:
        if not self.per_worker:
            self.per_worker = [WorkerMetrics() for _ in other.per_worker]
            self.per_master = [WorkerMetrics() for _ in other.per_master]
        for a, b in zip(self.per_worker, other.per_worker):
            a.add(b)
        for a, b in zip(self.per_master, other.per_master):
            a.add(b)
        for name in (
            "streams_sent",
            "streams_received",
            "bytes_sent",
            "local_streams",
            "activations",
            "scheduling_events",
            "compute_invocations",
            "ticks",
        ):
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def to_json(self) -> dict:
        def entry(m: WorkerMetrics) -> dict:
            return {
                "graph_op_ns": m.graph_op_ns,
                "pack_unpack_ns": m.pack_unpack_ns,
                "kernel_ns": m.kernel_ns,
                "comm_ns": m.comm_ns,
                "idle_ns": m.idle_ns,
                "wall_ns": m.wall_ns,
            }

        return {
            "per_worker": [entry(m) for m in self.per_worker],
            "per_master": [entry(m) for m in self.per_master],
            "streams_sent": self.streams_sent,
            "streams_received": self.streams_received,
            "bytes_sent": self.bytes_sent,
            "local_streams": self.local_streams,
            "activations": self.activations,
            "iterations": self.iterations,
            "scheduling_events": self.scheduling_events,
            "compute_invocations": self.compute_invocations,
        }


# ------------------------------------------------------------------ problem


class SweepProblem:
    """Angle graphs, patch subgraphs and cached priorities for one decomposition."""

    def __init__(self, decomp: Decomposition, directions: DirectionSet):
        self.decomp = decomp
        self.directions = directions
        self.graphs: list[AngleGraph] = build_angle_graphs(decomp.mesh, directions)
        for g in self.graphs:
            require_acyclic(g)
        self.subgraphs: list[list[PatchSubgraph]] = [build_subgraphs(decomp, g) for g in self.graphs]
        self._priorities: dict = {}

    @property
    def n_angles(self) -> int:
        return len(self.graphs)

    def priorities(self, strategy: Strategy | str, patch_process: dict[int, int] | None = None) -> PriorityAssignment:
        strategy = Strategy(strategy)
        key = (strategy, None if patch_process is None else tuple(sorted(patch_process.items())))
        if key not in self._priorities:
            vp = {}
            pp = {}
            for a, g in enumerate(self.graphs):
                vp[a] = compute_vertex_priority(g, self.subgraphs[a], strategy)
                pp[a] = compute_patch_priority(self.subgraphs[a], strategy, patch_process)
            self._priorities[key] = make_priority_assignment(strategy, vp, pp)
        return self._priorities[key]


# ------------------------------------------------------------------ processes


class _Slot:
    __slots__ = ("program", "pending", "running", "priority")

    def __init__(self, program: PatchProgram, priority: int):
        self.program = program
        self.pending: deque = deque()
        self.running = False
        self.priority = priority


class Worker:
    def __init__(self, process: "Process", wid: int):
        self.process = process
        self.wid = wid
        self.mailbox: list[tuple[int, int, PatchProgramId]] = []
        self.bound: set[PatchProgramId] = set()
        self.metrics = WorkerMetrics()

    def load(self) -> int:
        slots = self.process.slots
        return sum(slots[pid].program.remaining for pid in self.bound)


class Process:
    def __init__(self, rank: int, n_workers: int):
        self.rank = rank
        self.workers = [Worker(self, w) for w in range(n_workers)]
        self.slots: dict[PatchProgramId, _Slot] = {}
        self.outbox: deque = deque()
        self.ledger = 0
        self.lock = threading.RLock()
        self.work_ready = threading.Condition(self.lock)
        self.master_wake = threading.Event()
        self.master_metrics = WorkerMetrics()
        self.bind_log: list[tuple[PatchProgramId, int, list[int]]] = []

    def passive(self) -> bool:
        with self.lock:
            if self.outbox:
                return False
            return all(s.program.state.status is Status.INACTIVE for s in self.slots.values())


@dataclass
class SweepResult:
    psi: np.ndarray
    metrics: RuntimeMetrics
    recorder: KernelRecorder | None
    programs: dict[PatchProgramId, PatchProgram]
    workload_tick: int | None = None
    consensus_tick: int | None = None
    safra_rounds: int = 0


class SweepExecution:
    """State of one sweep across all simulated processes."""

    def __init__(
        self,
        programs: dict[PatchProgramId, PatchProgram],
        priorities: dict[PatchProgramId, int],
        table: RouteTable,
        config: RuntimeConfig,
        clock: Callable[[], int],
    ):
        self.config = config
        self.table = table
        self.clock = clock
        self.programs = programs
        n = config.processes
        self.transport = Transport(n, config.max_latency, config.seed)
        self.detector = SafraDetector(n)
        self.processes = [Process(r, config.workers) for r in range(n)]
        self.now = 0
        self._seq = itertools.count()
        self._routed = itertools.count()
        self.local_streams = 0
        self.activations = 0
        self.progress = 0
        self._mailbox_seq = itertools.count()

        for pid, prog in programs.items():
            proc = self.processes[table.home(pid)]
            proc.slots[pid] = _Slot(prog, priorities[pid])
            proc.ledger += prog.remaining
        # programs start ACTIVE, dealt round-robin by (angle, patch) to workers
        for proc in self.processes:
            order = sorted(proc.slots, key=lambda pid: (pid.task, pid.patch))
            for i, pid in enumerate(order):
                self._bind(proc, pid, proc.workers[i % len(proc.workers)])

    # ---- helpers (callers hold proc.lock)

    def _bind(self, proc: Process, pid: PatchProgramId, worker: Worker) -> None:
        slot = proc.slots[pid]
        worker.bound.add(pid)
        self.table.bind(pid, worker.wid)
        heapq.heappush(worker.mailbox, (-slot.priority, next(self._mailbox_seq), pid))

    def assign_on_activation(self, proc: Process, pid: PatchProgramId) -> int:
        """Bind a reactivated program to the worker with the least remaining work."""
        loads = [w.load() for w in proc.workers]
        best = min(range(len(loads)), key=lambda i: (loads[i], i))
        proc.bind_log.append((pid, best, loads))
        self._bind(proc, pid, proc.workers[best])
        return best

    def _deliver(self, proc: Process, stream: Stream) -> None:
        pid = stream.target
        with proc.lock:
            slot = proc.slots.get(pid)
            if slot is None:
                raise RoutingError(f"process {proc.rank} does not host {pid}")
            slot.pending.append(stream)
            # a running program is re-examined by its worker when the run ends
            if slot.program.state.status is Status.INACTIVE and not slot.running:
                slot.program.state.activate()
                self.activations += 1
                self.assign_on_activation(proc, pid)
                proc.work_ready.notify_all()

    # ---- steps

    def master_step(self, proc: Process) -> bool:
        clock = self.clock
        m = proc.master_metrics
        progressed = False
        t0 = clock()
        incoming = self.transport.receive(proc.rank, self.now)
        t1 = clock()
        m.comm_ns += t1 - t0
        for data in incoming:
            self.detector.on_receive(proc.rank)
            t = clock()
            stream = Stream.unpack(data)
            t2 = clock()
            m.pack_unpack_ns += t2 - t
            self._deliver(proc, stream)
            m.graph_op_ns += clock() - t2
            progressed = True
        while True:
            try:
                stream = proc.outbox.popleft()
            except IndexError:
                break
            progressed = True
            k = next(self._routed)
            if self.config.drop_stream is not None and k == self.config.drop_stream:
                log.warning("fault injection: dropping stream %d (%s -> %s)", k, stream.source, stream.target)
                continue
            t = clock()
            dst = self.table.home(stream.target)
            if dst == proc.rank:
                self.local_streams += 1
                self._deliver(proc, stream)
                m.graph_op_ns += clock() - t
                continue
            stream.seq = next(self._seq)
            data = stream.pack()
            t2 = clock()
            m.pack_unpack_ns += t2 - t
            self.detector.on_send(proc.rank)
            self.transport.send(proc.rank, dst, data, self.now)
            m.comm_ns += clock() - t2
        if self.config.termination is TerminationMode.CONSENSUS:
            self.detector.step(proc.rank, proc.passive())
        if progressed:
            self.progress += 1
        else:
            m.idle_ns += clock() - t0
        return progressed

    def worker_step(self, worker: Worker) -> bool:
        proc = worker.process
        clock = self.clock
        m = worker.metrics
        t0 = clock()
        with proc.lock:
            if not worker.mailbox:
                m.idle_ns += clock() - t0
                return False
            _, _, pid = heapq.heappop(worker.mailbox)
            slot = proc.slots[pid]
            slot.running = True
        prog = slot.program
        before = prog.remaining
        timers = getattr(prog, "timers", None)
        snap = (timers.graph_op_ns, timers.kernel_ns, timers.pack_unpack_ns) if timers else (0, 0, 0)
        comm = 0

        def receive():
            try:
                return slot.pending.popleft()
            except IndexError:
                return None

        def send(s: Stream) -> None:
            nonlocal comm
            t = clock()
            proc.outbox.append(s)
            comm += clock() - t

        t1 = clock()
        try:
            halted = run_program_once(prog, receive, send)
        except BaseException:
            with proc.lock:
                slot.running = False
            raise
        t2 = clock()
        proc.master_wake.set()
        with proc.lock:
            slot.running = False
            proc.ledger -= before - prog.remaining
            if halted and slot.pending:
                # a stream arrived while the program ran; it must not be lost
                prog.state.activate()
                self.activations += 1
            if prog.state.status is Status.ACTIVE:
                heapq.heappush(worker.mailbox, (-slot.priority, next(self._mailbox_seq), pid))
            else:
                worker.bound.discard(pid)
                self.table.unbind(pid)
        if timers:
            g = timers.graph_op_ns - snap[0]
            k = timers.kernel_ns - snap[1]
            p = timers.pack_unpack_ns - snap[2]
        else:
            g, k, p = t2 - t1, 0, 0
        m.kernel_ns += k
        m.pack_unpack_ns += p
        m.comm_ns += comm
        # scheduling bookkeeping outside the program counts as graph work
        m.graph_op_ns += g + (t1 - t0)
        m.runs += 1
        self.progress += 1
        return True

    # ---- termination

    def detect_termination_workload(self) -> bool:
        if any(p.ledger for p in self.processes):
            return False
        return self.transport.in_flight() == 0

    def detect_termination_consensus(self) -> bool:
        return self.detector.terminated

    def quiescent(self) -> bool:
        if self.transport.in_flight():
            return False
        return all(p.passive() for p in self.processes)

    def remaining(self) -> int:
        return sum(p.ledger for p in self.processes)

    def dump(self) -> dict:
        return {
            "ledgers": [p.ledger for p in self.processes],
            "in_flight": self.transport.in_flight(),
            "active": sorted(
                (pid.patch, pid.task)
                for p in self.processes
                for pid, s in p.slots.items()
                if s.program.state.status is Status.ACTIVE
            ),
            "unfinished": sorted(
                (pid.patch, pid.task, s.program.remaining)
                for p in self.processes
                for pid, s in p.slots.items()
                if s.program.remaining
            )[:50],
        }


def detect_termination_workload(execution: SweepExecution) -> bool:
    return execution.detect_termination_workload()


def detect_termination_consensus(execution: SweepExecution) -> bool:
    return execution.detect_termination_consensus()


class Runtime:
    """Runs sweeps of one decomposition and direction set under a fixed configuration."""

    def __init__(self, problem: SweepProblem, config: RuntimeConfig):
        self.problem = problem
        self.config = config
        self.patch_process = round_robin_processes(problem.decomp.n_patches, config.processes)
        self.assignment = problem.priorities(config.strategy, self.patch_process)
        self.cgs: list[CoarsenedGraph] | None = None
        self._fingerprints = [graph_fingerprint(problem.decomp, g) for g in problem.graphs]
        self.cg_build_seconds = 0.0

    @classmethod
    def from_decomposition(cls, decomp: Decomposition, directions: DirectionSet, config: RuntimeConfig) -> "Runtime":
        return cls(SweepProblem(decomp, directions), config)

    def _clock(self):
        return VirtualClock() if self.config.deterministic else time.perf_counter_ns

    def _build_programs(self, kernel: Kernel, coarse: bool, clock) -> dict[PatchProgramId, PatchProgram]:
        prob = self.problem
        programs: dict[PatchProgramId, PatchProgram] = {}
        next_seq = itertools.count().__next__
        for a in range(prob.n_angles):
            if coarse:
                cg = self.cgs[a]
                if cg.fingerprint != self._fingerprints[a]:
                    raise StaleGraphError(f"coarsened graph for angle {a} no longer matches the mesh")
            for sg in prob.subgraphs[a]:
                if coarse:
                    prog = CoarseSweepProgram(cg, sg.patch_id, kernel, self.config.grain, clock=clock)
                else:
                    prog = SweepProgram(
                        sg,
                        prob.graphs[a],
                        prob.decomp.patch_of_cell,
                        self.assignment.vertex_priority[a],
                        kernel,
                        self.config.grain,
                        next_seq=next_seq,
                        clock=clock,
                    )
                programs[prog.pid] = prog
        return programs

    def build_coarsened(self, programs: dict[PatchProgramId, PatchProgram]) -> list[CoarsenedGraph]:
        t0 = time.perf_counter()
        cgs = []
        for a, g in enumerate(self.problem.graphs):
            traces = {
                pid.patch: prog.cluster_trace for pid, prog in programs.items() if pid.task == a
            }
            cg = build_coarsened_graph(traces, g, self._fingerprints[a])
            verify_acyclic(cg)
            cgs.append(cg)
        self.cg_build_seconds = time.perf_counter() - t0
        return cgs

    def invalidate(self) -> None:
        self.cgs = None

    def prepare(self, kernel: Kernel, coarse: bool = False, recorder: KernelRecorder | None = None) -> SweepExecution:
        """Programs, processes and transport for one sweep, before any step runs."""
        if coarse and self.cgs is None:
            raise StaleGraphError("no coarsened graph recorded; run a DAG sweep first")
        if recorder is not None:
            kernel = recorder.wrap(kernel)
        clock = self._clock()
        programs = self._build_programs(kernel, coarse, clock)
        priorities = {pid: combined_priority(self.assignment, pid.patch, pid.task) for pid in programs}
        table = RouteTable(self.patch_process, range(self.problem.n_angles))
        return SweepExecution(programs, priorities, table, self.config, clock)

    def sweep(
        self,
        kernel: Kernel,
        coarse: bool | None = None,
        recorder: KernelRecorder | None = None,
        observer: Callable[[SweepExecution], None] | None = None,
    ) -> SweepResult:
        """One sweep of every angle.

        With ``coarse=None`` the runtime picks: coarsened graphs when mode is CG
        and a previous fine sweep recorded them, the fine DAG otherwise.
        """
        cfg = self.config
        if coarse is None:
            coarse = cfg.mode is SweepMode.CG and self.cgs is not None
        ex = self.prepare(kernel, coarse, recorder)
        programs = ex.programs
        if cfg.deterministic:
            workload_tick, consensus_tick = self._run_deterministic(ex, observer)
        else:
            workload_tick, consensus_tick = self._run_threaded(ex)

        psi = self._gather(programs)
        if not coarse and cfg.mode is SweepMode.CG:
            self.cgs = self.build_coarsened(programs)
        metrics = RuntimeMetrics(
            per_worker=[w.metrics for p in ex.processes for w in p.workers],
            per_master=[p.master_metrics for p in ex.processes],
            streams_sent=sum(ex.transport.sent),
            streams_received=sum(ex.transport.received),
            bytes_sent=sum(ex.transport.bytes_sent),
            local_streams=ex.local_streams,
            activations=ex.activations,
            scheduling_events=sum(p.scheduled_units for p in programs.values()),
            compute_invocations=sum(p.compute_invocations for p in programs.values()),
            ticks=ex.now,
        )
        return SweepResult(psi, metrics, recorder, programs, workload_tick, consensus_tick, ex.detector.rounds)

    def _gather(self, programs) -> np.ndarray:
        prob = self.problem
        psi = np.full((prob.n_angles, prob.decomp.mesh.n_cells), np.nan)
        for pid, prog in programs.items():
            row = psi[pid.task]
            for c in prob.decomp.patches[pid.patch].local_cells:
                if c in prog.values:
                    row[c] = prog.values[c]
        return psi

    def _deadlock(self, ex: SweepExecution, why: str):
        raise DeadlockError(
            f"sweep cannot finish ({why}); {ex.remaining()} vertices left",
            partial=self._gather(ex.programs),
            dump=ex.dump(),
        )

    def _run_deterministic(self, ex: SweepExecution, observer) -> tuple[int | None, int | None]:
        cfg = self.config
        consensus = cfg.termination is TerminationMode.CONSENSUS
        idle = 0
        workload_tick = None
        start = ex.clock()
        while True:
            progressed = False
            for proc in ex.processes:
                progressed |= ex.master_step(proc)
                for w in proc.workers:
                    progressed |= ex.worker_step(w)
            if observer is not None:
                observer(ex)
            done = ex.detect_termination_workload()
            if done and workload_tick is None:
                workload_tick = ex.now
            if consensus:
                if ex.detect_termination_consensus():
                    if not done:
                        self._deadlock(ex, "consensus reached with work outstanding")
                    break
            elif done:
                break
            elif not progressed and ex.quiescent() and ex.transport.in_flight() == 0:
                self._deadlock(ex, "all programs inactive and no stream in flight")
            idle = 0 if progressed else idle + 1
            if idle >= cfg.watchdog_ticks:
                self._deadlock(ex, f"no progress for {idle} ticks")
            ex.now += 1
        end = ex.clock()
        for proc in ex.processes:
            proc.master_metrics.wall_ns = end - start
            for w in proc.workers:
                w.metrics.wall_ns = end - start
        return workload_tick, (ex.now if consensus else None)

    def _run_threaded(self, ex: SweepExecution) -> tuple[int | None, int | None]:
        cfg = self.config
        stop = threading.Event()
        errors: list[BaseException] = []
        consensus = cfg.termination is TerminationMode.CONSENSUS

        def guard(fn):
            def body():
                try:
                    fn()
                except BaseException as exc:  # surfaced in the coordinator
                    errors.append(exc)
                    stop.set()

            return body

        def master_loop(proc: Process):
            start = time.perf_counter_ns()
            while not stop.is_set():
                if not ex.master_step(proc):
                    t = time.perf_counter_ns()
                    proc.master_wake.wait(0.0005)
                    proc.master_wake.clear()
                    proc.master_metrics.idle_ns += time.perf_counter_ns() - t
            proc.master_metrics.wall_ns = time.perf_counter_ns() - start

        def worker_loop(w: Worker):
            start = time.perf_counter_ns()
            proc = w.process
            while not stop.is_set():
                if not ex.worker_step(w):
                    t = time.perf_counter_ns()
                    with proc.lock:
                        if not w.mailbox and not stop.is_set():
                            proc.work_ready.wait(0.002)
                    w.metrics.idle_ns += time.perf_counter_ns() - t
            w.metrics.wall_ns = time.perf_counter_ns() - start

        for proc in ex.processes:
            self_wake = proc.master_wake.set
            ex.transport.wake[proc.rank] = self_wake

        threads = []
        for proc in ex.processes:
            threads.append(threading.Thread(target=guard(lambda p=proc: master_loop(p)), daemon=True))
            for w in proc.workers:
                threads.append(threading.Thread(target=guard(lambda w=w: worker_loop(w)), daemon=True))
        for t in threads:
            t.start()
        workload_seen = None
        last_progress = ex.progress
        last_change = time.monotonic()
        polls = 0
        try:
            while not stop.is_set():
                polls += 1
                done = ex.detect_termination_workload()
                if done and workload_seen is None:
                    workload_seen = polls
                if consensus:
                    if ex.detect_termination_consensus():
                        if not done:
                            stop.set()
                            self._join(threads)
                            self._deadlock(ex, "consensus reached with work outstanding")
                        break
                elif done:
                    break
                if ex.progress != last_progress:
                    last_progress = ex.progress
                    last_change = time.monotonic()
                elif time.monotonic() - last_change > cfg.watchdog_seconds:
                    stop.set()
                    self._join(threads)
                    self._deadlock(ex, f"no progress for {cfg.watchdog_seconds}s")
                elif not consensus and time.monotonic() - last_change > 0.2 and ex.quiescent():
                    stop.set()
                    self._join(threads)
                    self._deadlock(ex, "all programs inactive and no stream in flight")
                time.sleep(0.0002)
        finally:
            stop.set()
            for proc in ex.processes:
                with proc.lock:
                    proc.work_ready.notify_all()
                proc.master_wake.set()
            self._join(threads)
        if errors:
            raise errors[0]
        ex.now = polls
        return workload_seen, (polls if consensus else None)

    @staticmethod
    def _join(threads):
        for t in threads:
            t.join(timeout=10)


def run(
    decomp: Decomposition,
    directions: DirectionSet,
    config: RuntimeConfig,
    kernel: Kernel,
    recorder: KernelRecorder | None = None,
) -> SweepResult:
    """Single fine-graph sweep of every angle."""
    return Runtime.from_decomposition(decomp, directions, config).sweep(kernel, coarse=False, recorder=recorder)
