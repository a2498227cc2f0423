"""Random sweep problems and a randomized driver shared by several test modules."""

import random

from patchsweep.mesh import custom_directions, decomposition_from_labels, mesh_from_edges
from patchsweep.patchprog import PatchProgramId, Status, run_program_once
from patchsweep.sweepgraph import build_angle_graph, build_subgraphs


def random_dag(rng: random.Random, n: int, p: float):
    """Edges only go from lower to higher index, so the graph is acyclic."""
    perm = list(range(n))
    rng.shuffle(perm)
    edges = set()
    for i in range(n):
        for j in range(i + 1, min(n, i + 8)):
            if rng.random() < p:
                edges.add((perm[i], perm[j]))
    return sorted(edges)


def random_problem(rng: random.Random, n: int, n_patches: int, p: float = 0.4):
    edges = random_dag(rng, n, p)
    mesh = mesh_from_edges(n, edges)
    labels = [rng.randrange(n_patches) for _ in range(n)]
    for q in range(n_patches):
        if q < n:
            labels[q] = q  # every patch owns at least one cell
    decomp = decomposition_from_labels(mesh, labels)
    dirs = custom_directions([(1.0, 0.0, 0.0)])
    graph = build_angle_graph(mesh, 0, dirs.directions[0])
    return decomp, graph, build_subgraphs(decomp, graph), edges


def sum_kernel(graph):
    """values[c] = c + 1 + sum of upwind values in face order."""

    def kernel(angle, cells, values):
        for c in cells:
            acc = float(c + 1)
            for _, u, _ in graph.incoming[c]:
                if u >= 0:
                    acc += values[u]
            values[c] = acc

    return kernel


def random_drive(programs, rng: random.Random, max_steps: int = 10**6):
    """Run programs in random order with random delivery delays.

    Returns the list of streams that were delivered.
    """
    by_id = {p.pid: p for p in programs}
    in_flight = []
    inbox = {pid: [] for pid in by_id}
    delivered = []
    for _ in range(max_steps):
        active = [pid for pid, p in by_id.items() if p.state.status is Status.ACTIVE]
        if not active and not in_flight:
            return delivered
        if in_flight and (not active or rng.random() < 0.5):
            s = in_flight.pop(rng.randrange(len(in_flight)))
            inbox[s.target].append(s)
            delivered.append(s)
            by_id[s.target].state.activate()
            continue
        pid = rng.choice(active)
        msgs = inbox[pid]
        inbox[pid] = []
        it = iter(msgs)
        run_program_once(by_id[pid], lambda: next(it, None), in_flight.append)
        if inbox[pid]:
            by_id[pid].state.activate()
    raise RuntimeError("random_drive did not finish")
