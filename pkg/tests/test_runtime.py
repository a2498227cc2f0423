import itertools
import math
import random

import numpy as np
import pytest

from conftest import bits
from patchsweep.coarsen import StaleGraphError
from patchsweep.mesh import (
    StructuredMeshSpec,
    build_structured_mesh,
    custom_directions,
    decompose_structured,
    decomposition_from_labels,
    mesh_from_edges,
)
from patchsweep.patchprog import (
    UNLIMITED,
    KernelRecorder,
    PatchProgram,
    PatchProgramId,
    Status,
    Stream,
    is_topological,
)
from patchsweep.runtime import (
    UNASSIGNED,
    DeadlockError,
    RouteTable,
    RoutingError,
    Runtime,
    RuntimeConfig,
    SafraDetector,
    SweepExecution,
    SweepProblem,
    Transport,
    VirtualClock,
    detect_termination_consensus,
    detect_termination_workload,
    round_robin_processes,
    route,
    run,
)
from patchsweep.solver import CrossSections, TransportKernel, oracle_sweep_fields
from patchsweep.sweepgraph import CycleError


def det(**kw):
    kw.setdefault("deterministic", True)
    return RuntimeConfig(**kw)


def kernel_for(problem, xs=None):
    mesh = problem.decomp.mesh
    xs = xs or CrossSections.uniform(mesh.n_cells, 1.0, 0.5, 1.0)
    return TransportKernel(mesh, problem.graphs, xs)


def oracle(problem):
    return oracle_sweep_fields(problem.decomp.mesh, problem.graphs, kernel_for(problem))


class Fake(PatchProgram):
    """Program with a fixed amount of remaining work that halts after one run."""

    def __init__(self, patch, task, remaining, log=None):
        super().__init__(patch, task)
        self._remaining = remaining
        self.log = log if log is not None else []
        self.inputs = []

    @property
    def remaining(self):
        return self._remaining

    def init(self):
        self.state.initialized = True

    def input(self, s):
        self.inputs.append(s)

    def compute(self):
        self.log.append(self.pid)
        self._remaining = 0
        return []

    def output(self):
        return None

    def vote_to_halt(self):
        return True


def fake_execution(programs, priorities, procs=1, workers=1, patch_process=None):
    patch_process = patch_process or {p.pid.patch: 0 for p in programs}
    table = RouteTable(patch_process, sorted({p.pid.task for p in programs}))
    cfg = det(processes=procs, workers=workers)
    return SweepExecution({p.pid: p for p in programs}, priorities, table, cfg, VirtualClock())


# ------------------------------------------------------------------ routing


def test_route_local_and_remote(two_patch):
    d, dirs = two_patch
    table = RouteTable({0: 0, 1: 1}, [0])
    assert route(Stream(0, 0, 0, 0), table) == (0, UNASSIGNED)
    # patch 1 -> patch 0 lands on the process that owns patch 0
    assert route(Stream(1, 0, 0, 0, [(8, 9, 1.0)]), table)[0] == 0
    with pytest.raises(RoutingError):
        route(Stream(0, 0, 2, 0), table)
    with pytest.raises(RoutingError):
        route(Stream(0, 0, 0, 3), table)


def test_route_table_exhaustive():
    mesh = build_structured_mesh(StructuredMeshSpec((4, 4, 1)))
    d = decompose_structured(mesh, (2, 2, 1))
    pp = round_robin_processes(d.n_patches, 2)
    table = RouteTable(pp, range(3))
    for c in range(mesh.n_cells):
        for t in range(3):
            s = Stream(0, t, d.patch_of_cell[c], t)
            assert route(s, table)[0] == d.patch_of_cell[c] % 2


def test_transport_fifo_under_latency():
    tr = Transport(2, max_latency=5, seed=3)
    for i in range(50):
        tr.send(0, 1, bytes([i]), now=i // 3)
    got = []
    for now in range(100):
        got += tr.receive(1, now)
    assert got == [bytes([i]) for i in range(50)]
    assert tr.sent == [50, 0] and tr.received == [0, 50] and tr.in_flight() == 0


# ------------------------------------------------------------------ load balance


def test_assign_idle_workers_picks_zero():
    progs = [Fake(0, 0, 3)]
    ex = fake_execution(progs, {progs[0].pid: 1}, workers=3)
    proc = ex.processes[0]
    proc.workers[0].bound.clear()
    proc.workers[0].mailbox.clear()
    assert ex.assign_on_activation(proc, progs[0].pid) == 0


def test_assign_picks_lightest():
    progs = [Fake(p, 0, r) for p, r in enumerate([5, 2, 9])] + [Fake(3, 0, 4)]
    ex = fake_execution(progs, {p.pid: 1 for p in progs}, workers=3)
    proc = ex.processes[0]
    late = progs[3].pid
    # the fourth program was dealt to worker 0; pretend it is still unbound
    proc.workers[0].bound.discard(late)
    ex.table.unbind(late)
    assert [w.load() for w in proc.workers] == [5, 2, 9]
    assert ex.assign_on_activation(proc, late) == 1
    assert ex.table.worker(late) == 1


def test_bindings_minimize_load_at_decision_time(cube4, monkeypatch):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    rt = Runtime(problem, det(processes=2, workers=3, grain=2))
    decisions = []
    original = SweepExecution.assign_on_activation

    def replay(self, proc, pid):
        # loads recomputed from the route table, not from the worker's own bookkeeping
        loads = [0] * len(proc.workers)
        for q, slot in proc.slots.items():
            w = self.table.worker(q)
            if w != UNASSIGNED:
                loads[w] += slot.program.remaining
        chosen = original(self, proc, pid)
        decisions.append((loads, chosen))
        return chosen

    monkeypatch.setattr(SweepExecution, "assign_on_activation", replay)
    rt.sweep(kernel_for(problem))
    assert len(decisions) > 10
    for loads, chosen in decisions:
        assert chosen == min(range(len(loads)), key=lambda i: (loads[i], i))


def test_binding_changes_only_when_unbound(cube4, monkeypatch):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    original = RouteTable.bind

    def checked(self, pid, worker):
        assert self.worker(pid) == UNASSIGNED
        original(self, pid, worker)

    monkeypatch.setattr(RouteTable, "bind", checked)
    res = Runtime(problem, det(processes=2, workers=2, grain=4)).sweep(kernel_for(problem))
    assert res.metrics.activations > 0


def test_initial_assignment_is_even():
    progs = [Fake(p, t, 1) for t in range(2) for p in range(3)]
    ex = fake_execution(progs, {p.pid: 1 for p in progs}, workers=4)
    bound = [sorted(w.bound) for w in ex.processes[0].workers]
    order = sorted((p.pid for p in progs), key=lambda pid: (pid.task, pid.patch))
    assert bound == [sorted(order[i::4]) for i in range(4)]


# ------------------------------------------------------------------ steps


def test_master_idle_tick():
    progs = [Fake(0, 0, 3)]
    ex = fake_execution(progs, {progs[0].pid: 1})
    proc = ex.processes[0]
    before = proc.master_metrics.idle_ns
    assert ex.master_step(proc) is False
    assert proc.master_metrics.idle_ns > before


def test_master_delivers_and_binds():
    progs = [Fake(0, 0, 3), Fake(1, 0, 2)]
    ex = fake_execution(progs, {p.pid: 1 for p in progs}, procs=2, patch_process={0: 0, 1: 1})
    target = progs[1]
    target.state.deactivate()
    w = ex.processes[1].workers[0]
    w.bound.clear()
    w.mailbox.clear()
    ex.table.unbind(target.pid)
    ex.processes[0].outbox.append(Stream(0, 0, 1, 0, [(0, 1, 2.5)]))
    assert ex.master_step(ex.processes[0]) is True
    assert ex.transport.sent == [1, 0]
    assert ex.master_step(ex.processes[1]) is True
    assert target.state.status is Status.ACTIVE and ex.table.worker(target.pid) == 0
    assert ex.transport.received == [0, 1] and ex.activations == 1
    assert ex.worker_step(w) is True
    assert target.inputs[0].payload == [(0, 1, 2.5)]


def test_worker_empty_mailbox():
    progs = [Fake(0, 0, 3)]
    ex = fake_execution(progs, {progs[0].pid: 1}, workers=2)
    assert ex.worker_step(ex.processes[0].workers[1]) is False


def test_worker_runs_highest_priority_first():
    log = []
    progs = [Fake(0, 0, 1, log), Fake(1, 0, 1, log)]
    ex = fake_execution(progs, {progs[0].pid: 7, progs[1].pid: 12})
    w = ex.processes[0].workers[0]
    assert ex.worker_step(w) and ex.worker_step(w)
    assert log == [progs[1].pid, progs[0].pid]
    assert ex.processes[0].ledger == 0 and not w.bound


# ------------------------------------------------------------------ termination


def test_safra_single_process_terminates_immediately():
    s = SafraDetector(1)
    assert s.step(0, passive=True) and s.terminated


def test_safra_waits_for_passive_initiator():
    s = SafraDetector(1)
    assert not s.step(0, passive=False)
    assert s.step(0, passive=True)


def test_safra_blackened_token_needs_another_round():
    s = SafraDetector(3)
    assert not s.step(0, True)  # round 1 starts, token at 2
    assert s.holder == 2
    assert not s.step(2, True)
    # process 1 wakes up, sends to 2 after the token has passed 2
    s.on_send(1)
    s.on_receive(2)
    assert not s.step(1, True)
    assert not s.step(0, True)  # balance +1 seen: round 2
    assert s.rounds == 2
    assert not s.step(2, True)  # 2 is black: token turns dirty
    assert not s.step(1, True)
    assert not s.step(0, True)  # round 3
    assert s.rounds == 3
    assert not s.step(2, True) and not s.step(1, True)
    assert s.step(0, True) and s.terminated


def test_safra_ignores_non_holder_and_active():
    s = SafraDetector(2)
    assert not s.step(1, True)
    assert not s.step(0, True)
    assert not s.step(1, False)
    assert s.holder == 1


@pytest.mark.parametrize("procs,latency,seed", [(1, 0, 0), (2, 0, 0), (3, 4, 1), (4, 7, 2)])
def test_workload_and_consensus_agree(cube4, procs, latency, seed):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    ref = oracle(problem)
    results = {}
    for term in ("workload", "consensus"):
        cfg = det(processes=procs, workers=2, grain=3, termination=term, max_latency=latency, seed=seed)
        res = Runtime(problem, cfg).sweep(kernel_for(problem))
        assert np.array_equal(bits(res.psi), bits(ref))
        results[term] = res
    w, c = results["workload"], results["consensus"]
    assert w.workload_tick is not None and c.consensus_tick is not None
    # consensus never announces before the global predicate holds
    assert c.consensus_tick >= c.workload_tick


def test_workload_predicate_fresh_and_done(cube4):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    rt = Runtime(problem, det(processes=2))
    ex = rt.prepare(kernel_for(problem))
    assert not detect_termination_workload(ex)
    assert not detect_termination_consensus(ex)
    res = rt.sweep(kernel_for(problem))
    assert res.metrics.ticks > 0


@pytest.mark.parametrize("seed", range(3))
def test_ledgers_never_zero_with_stream_in_flight(cube4, seed):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    history = []

    def observe(ex):
        ledgers = [p.ledger for p in ex.processes]
        history.append(sum(ledgers))
        if not any(ledgers):
            assert ex.transport.in_flight() == 0

    cfg = det(processes=4, workers=2, grain=2, max_latency=6, seed=seed)
    Runtime(problem, cfg).sweep(kernel_for(problem), observer=observe)
    assert history[-1] == 0
    assert all(a >= b for a, b in zip(history, history[1:]))


# ------------------------------------------------------------------ full runs


def test_one_patch_one_angle_equals_oracle():
    mesh = build_structured_mesh(StructuredMeshSpec((3, 2, 2)))
    d = decompose_structured(mesh, (3, 2, 2))
    dirs = custom_directions([(0.3, -0.5, 0.8)])
    problem = SweepProblem(d, dirs)
    res = run(d, dirs, det(), kernel_for(problem))
    assert np.array_equal(bits(res.psi), bits(oracle(problem)))


def test_four_directions_progress_concurrently():
    mesh = build_structured_mesh(StructuredMeshSpec((8, 4, 1)))
    d = decompose_structured(mesh, (4, 4, 1))
    h = 1 / math.sqrt(2)
    dirs = custom_directions([(h, h, 0), (-h, h, 0), (-h, -h, 0), (h, -h, 0)])
    problem = SweepProblem(d, dirs)
    rt = Runtime(problem, det(processes=2, workers=2, grain=2))
    ex = rt.prepare(kernel_for(problem))
    assert len(ex.programs) == 8
    overlap = []

    def observe(ex):
        started = {pid.task for pid, p in ex.programs.items() if 0 < p.computed_count}
        done = {t for t in range(4) if all(p.remaining == 0 for pid, p in ex.programs.items() if pid.task == t)}
        overlap.append(len(started - done))

    rt.sweep(kernel_for(problem), observer=observe)
    assert max(overlap) == 4


def test_configurations_give_identical_fields(cube8):
    d, dirs = cube8
    problem = SweepProblem(d, dirs)
    ref = oracle(problem)
    for procs, workers in itertools.product([1, 2, 4], [1, 2, 4]):
        rec = KernelRecorder()
        cfg = det(processes=procs, workers=workers, grain=64)
        res = Runtime(problem, cfg).sweep(kernel_for(problem), recorder=rec)
        assert np.array_equal(bits(res.psi), bits(ref)), (procs, workers)
        assert set(rec.counts.values()) == {1} and len(rec.counts) == ref.size
        # remote streams only exist with more than one process
        assert (res.metrics.streams_sent > 0) == (procs > 1)


def test_exactly_once_and_topological(cube4):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    for strategy, grain in itertools.product(["ldcp", "bfs", "slbd"], [1, 5, UNLIMITED]):
        rec = KernelRecorder()
        cfg = det(processes=3, workers=2, grain=grain, strategy=strategy, max_latency=3, seed=grain)
        rt = Runtime(problem, cfg)
        ex_res = rt.sweep(kernel_for(problem), recorder=rec)
        assert set(rec.counts.values()) == {1} and len(rec.counts) == ex_res.psi.size
        for a, g in enumerate(problem.graphs):
            assert is_topological({c: rec.stamp[(c, a)] for c in range(g.n_cells)}, g.edges())


def test_deterministic_mode_is_reproducible(cube4):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    runs = []
    for _ in range(2):
        rec = KernelRecorder()
        res = Runtime(problem, det(processes=2, workers=1, grain=3, max_latency=2, seed=5)).sweep(
            kernel_for(problem), recorder=rec
        )
        runs.append((rec.stamp, res.metrics.to_json()))
    assert runs[0] == runs[1]


@pytest.mark.parametrize("term", ["workload", "consensus"])
def test_threaded_mode(cube8, term):
    d, dirs = cube8
    problem = SweepProblem(d, dirs)
    rec = KernelRecorder()
    cfg = RuntimeConfig(processes=2, workers=3, grain=16, termination=term)
    res = Runtime(problem, cfg).sweep(kernel_for(problem), recorder=rec)
    assert np.array_equal(bits(res.psi), bits(oracle(problem)))
    assert set(rec.counts.values()) == {1}
    for w in res.metrics.per_worker + res.metrics.per_master:
        assert w.category_sum() <= w.wall_ns
    assert sum(w.kernel_ns for w in res.metrics.per_worker) > 0


def test_threaded_cg_mode(cube4):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    rt = Runtime(problem, RuntimeConfig(processes=2, workers=2, grain=4, mode="cg"))
    first = rt.sweep(kernel_for(problem))
    second = rt.sweep(kernel_for(problem))
    assert np.array_equal(bits(first.psi), bits(second.psi))
    assert second.metrics.scheduling_events < first.metrics.scheduling_events


def test_metrics_conservation_deterministic(cube4):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    res = Runtime(problem, det(processes=2, workers=2, grain=4)).sweep(kernel_for(problem))
    m = res.metrics
    for w in m.per_worker + m.per_master:
        assert w.category_sum() <= w.wall_ns
    assert all(w.kernel_ns > 0 for w in m.per_worker if w.runs)
    doc = m.to_json()
    assert set(doc) >= {"per_worker", "streams_sent", "bytes_sent", "activations", "iterations"}
    assert set(doc["per_worker"][0]) >= {"graph_op_ns", "pack_unpack_ns", "kernel_ns", "comm_ns", "idle_ns"}
    assert m.streams_sent > 0 and m.bytes_sent > m.streams_sent


# ------------------------------------------------------------------ failures


def test_lost_stream_is_a_deadlock(cube4):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    for term in ("workload", "consensus"):
        cfg = det(processes=2, workers=1, grain=4, drop_stream=0, termination=term)
        with pytest.raises(DeadlockError) as exc:
            Runtime(problem, cfg).sweep(kernel_for(problem))
        assert np.isnan(exc.value.partial).any()
        assert sum(exc.value.dump["ledgers"]) > 0


def test_threaded_lost_stream_is_a_deadlock(cube4):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    cfg = RuntimeConfig(processes=2, workers=1, grain=4, drop_stream=0, watchdog_seconds=5)
    with pytest.raises(DeadlockError):
        Runtime(problem, cfg).sweep(kernel_for(problem))


def test_watchdog(cube4):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    cfg = det(processes=2, max_latency=50, seed=1, watchdog_ticks=2)
    with pytest.raises(DeadlockError, match="no progress"):
        Runtime(problem, cfg).sweep(kernel_for(problem))


def test_kernel_errors_propagate(cube4):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)

    def bad(angle, cells, values):
        raise ArithmeticError("bad cell")

    with pytest.raises(ArithmeticError):
        Runtime(problem, det(processes=2)).sweep(bad)
    with pytest.raises(ArithmeticError):
        Runtime(problem, RuntimeConfig(processes=2)).sweep(bad)


def test_cyclic_mesh_is_rejected():
    mesh = mesh_from_edges(3, [(0, 1), (1, 2), (2, 0)])
    d = decomposition_from_labels(mesh, [0, 1, 1])
    with pytest.raises(CycleError):
        SweepProblem(d, custom_directions([(1, 0, 0)]))


def test_stale_coarsened_graph(cube4):
    d, dirs = cube4
    problem = SweepProblem(d, dirs)
    rt = Runtime(problem, det(mode="cg"))
    with pytest.raises(StaleGraphError):
        rt.sweep(kernel_for(problem), coarse=True)
    rt.sweep(kernel_for(problem))
    rt._fingerprints[0] = ("changed",)
    with pytest.raises(StaleGraphError):
        rt.sweep(kernel_for(problem))
    rt.invalidate()
    assert rt.sweep(kernel_for(problem)).metrics.scheduling_events == d.mesh.n_cells * len(dirs)


@pytest.mark.parametrize(
    "kw",
    [
        {"processes": 0},
        {"workers": 0},
        {"grain": 0},
        {"max_latency": -1},
        {"max_latency": 3, "deterministic": False},
        {"strategy": "dfs"},
        {"termination": "vote"},
        {"mode": "tree"},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RuntimeConfig(**kw)
