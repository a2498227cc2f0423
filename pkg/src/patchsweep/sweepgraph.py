"""Per-angle dependency graphs, patch subgraphs and scheduling priorities.

A sweep vertex is a ``(cell, angle)`` pair. Within one angle the vertex is
identified by its cell id, so most structures here are keyed by cell.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .mesh import BOUNDARY, Cell, Decomposition, DirectionSet, Mesh

GRAZING_EPS = 1e-12


class Strategy(str, Enum):
    LDCP = "ldcp"
    BFS = "bfs"
    SLBD = "slbd"


class CycleError(RuntimeError):
    def __init__(self, angle: int, residual: list[int]):
        self.angle = angle
        self.residual = residual
        shown = ", ".join(map(str, residual[:20]))
        more = "" if len(residual) <= 20 else f" (+{len(residual) - 20} more)"
        super().__init__(f"dependency cycle in angle {angle}; residual cells: {shown}{more}")


@dataclass(frozen=True)
class SweepVertex:
    cell: int
    angle: int


def _dot(a, b) -> float:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def upwind_faces(cell: Cell, omega) -> list[int]:
    """Indices of faces through which ``omega`` enters the cell."""
    return [i for i, f in enumerate(cell.faces) if _dot(omega, f.normal) < -GRAZING_EPS]


@dataclass(frozen=True)
class AngleGraph:
    """Global cell dependency graph for one direction.

    ``incoming[c]`` lists ``(face_index, upwind neighbor or BOUNDARY, alpha)`` in
    ascending face order, with ``alpha = |omega . n| * area``.
    """

    angle: int
    omega: tuple[float, float, float]
    incoming: tuple[tuple[tuple[int, int, float], ...], ...]
    downwind: tuple[tuple[int, ...], ...]
    in_degree: tuple[int, ...]

    @property
    def n_cells(self) -> int:
        return len(self.incoming)

    def edges(self):
        for c, ups in enumerate(self.incoming):
            for _, u, _ in ups:
                if u != BOUNDARY:
                    yield (u, c)


def build_angle_graph(mesh: Mesh, angle: int, omega) -> AngleGraph:
    incoming = []
    downwind: list[list[int]] = [[] for _ in range(mesh.n_cells)]
    in_degree = []
    for cell in mesh.cells:
        ups = []
        deg = 0
        for fi in upwind_faces(cell, omega):
            f = cell.faces[fi]
            alpha = abs(_dot(omega, f.normal)) * f.area
            ups.append((fi, f.neighbor, alpha))
            if f.neighbor != BOUNDARY:
                downwind[f.neighbor].append(cell.cell_id)
                deg += 1
        incoming.append(tuple(ups))
        in_degree.append(deg)
    return AngleGraph(
        angle=angle,
        omega=tuple(omega),
        incoming=tuple(incoming),
        downwind=tuple(tuple(sorted(d)) for d in downwind),
        in_degree=tuple(in_degree),
    )


def build_angle_graphs(mesh: Mesh, directions: DirectionSet) -> list[AngleGraph]:
    return [build_angle_graph(mesh, m, omega) for m, omega in enumerate(directions.directions)]


@dataclass(frozen=True)
class PatchSubgraph:
    patch_id: int
    angle: int
    local_vertices: tuple[int, ...]
    local_edges: tuple[tuple[int, int], ...]
    in_cut_edges: tuple[tuple[int, int, int], ...]  # (u_remote, v_local, src_patch)
    out_cut_edges: tuple[tuple[int, int, int], ...]  # (u_local, v_remote, tgt_patch)
    upwind_count: dict[int, int] = field(hash=False)

    def __len__(self):
        return len(self.local_vertices)


def build_patch_subgraph(decomp: Decomposition, patch_id: int, graph: AngleGraph) -> PatchSubgraph:
    owner = decomp.patch_of_cell
    local = sorted(decomp.patches[patch_id].local_cells)
    local_edges = []
    in_cut = []
    out_cut = []
    counts = {}
    for c in local:
        n = 0
        for _, u, _ in graph.incoming[c]:
            if u == BOUNDARY:
                continue
            n += 1
            if owner[u] == patch_id:
                local_edges.append((u, c))
            else:
                in_cut.append((u, c, owner[u]))
        counts[c] = n
        for w in graph.downwind[c]:
            if owner[w] != patch_id:
                out_cut.append((c, w, owner[w]))
    return PatchSubgraph(
        patch_id=patch_id,
        angle=graph.angle,
        local_vertices=tuple(local),
        local_edges=tuple(sorted(local_edges)),
        in_cut_edges=tuple(in_cut),
        out_cut_edges=tuple(out_cut),
        upwind_count=counts,
    )


def build_subgraphs(decomp: Decomposition, graph: AngleGraph) -> list[PatchSubgraph]:
    return [build_patch_subgraph(decomp, p, graph) for p in range(decomp.n_patches)]


def detect_cycles(graph: AngleGraph) -> list[int]:
    """Kahn's algorithm over the angle graph; returns cells left unsorted."""
    deg = list(graph.in_degree)
    queue = deque(c for c, d in enumerate(deg) if d == 0)
    seen = 0
    while queue:
        c = queue.popleft()
        seen += 1
        for w in graph.downwind[c]:
            deg[w] -= 1
            if deg[w] == 0:
                queue.append(w)
    if seen == graph.n_cells:
        return []
    return [c for c, d in enumerate(deg) if d > 0]


def require_acyclic(graph: AngleGraph) -> None:
    residual = detect_cycles(graph)
    if residual:
        raise CycleError(graph.angle, residual)


def topological_order(graph: AngleGraph) -> list[int]:
    """Kahn traversal with ascending cell-id tie-break."""
    deg = list(graph.in_degree)
    heap = [c for c, d in enumerate(deg) if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        c = heapq.heappop(heap)
        order.append(c)
        for w in graph.downwind[c]:
            deg[w] -= 1
            if deg[w] == 0:
                heapq.heappush(heap, w)
    if len(order) != graph.n_cells:
        raise CycleError(graph.angle, [c for c, d in enumerate(deg) if d > 0])
    return order


# ---------------------------------------------------------------- priorities


def _longest_to_sink(nodes, succ, order) -> dict:
    dist = {}
    for v in reversed(order):
        dist[v] = max((dist[w] + 1 for w in succ(v)), default=0)
    return dist


def _bfs_depth(sources, succ) -> dict:
    depth = {s: 0 for s in sources}
    queue = deque(sorted(sources))
    while queue:
        v = queue.popleft()
        for w in succ(v):
            if w not in depth:
                depth[w] = depth[v] + 1
                queue.append(w)
    return depth


def _distance_to_set(nodes, targets, pred) -> dict:
    """Directed hop distance from each node forward to the nearest target."""
    dist = {t: 0 for t in targets}
    queue = deque(sorted(targets))
    while queue:
        v = queue.popleft()
        for u in pred(v):
            if u in nodes and u not in dist:
                dist[u] = dist[v] + 1
                queue.append(u)
    return dist


def compute_vertex_priority(
    graph: AngleGraph, subgraphs: list[PatchSubgraph], strategy: Strategy | str
) -> dict[int, int]:
    """Vertex priorities for one angle. Higher is dequeued first."""
    strategy = Strategy(strategy)
    order = topological_order(graph)
    if strategy is Strategy.LDCP:
        return _longest_to_sink(order, lambda v: graph.downwind[v], order)
    if strategy is Strategy.BFS:
        sources = [c for c, d in enumerate(graph.in_degree) if d == 0]
        depth = _bfs_depth(sources, lambda v: graph.downwind[v])
        return {c: -depth[c] for c in range(graph.n_cells)}

    prio: dict[int, int] = {}
    rank = {v: i for i, v in enumerate(order)}
    for sg in subgraphs:
        nodes = set(sg.local_vertices)
        local_succ: dict[int, list[int]] = {v: [] for v in nodes}
        local_pred: dict[int, list[int]] = {v: [] for v in nodes}
        for u, v in sg.local_edges:
            local_succ[u].append(v)
            local_pred[v].append(u)
        local_order = sorted(nodes, key=rank.__getitem__)
        longest = _longest_to_sink(nodes, local_succ.__getitem__, local_order)
        boundary = {u for u, _, _ in sg.out_cut_edges}
        if not boundary:
            for v in nodes:
                prio[v] = -longest[v]
            continue
        dist = _distance_to_set(nodes, boundary, local_pred.__getitem__)
        # vertices that cannot reach the patch boundary rank after all that can
        offset = max(dist.values()) + 1
        for v in nodes:
            prio[v] = -dist[v] if v in dist else -(offset + longest[v])
    return prio


def patch_condensation(subgraphs: list[PatchSubgraph]) -> dict[int, set[int]]:
    succ: dict[int, set[int]] = {sg.patch_id: set() for sg in subgraphs}
    for sg in subgraphs:
        for _, _, q in sg.out_cut_edges:
            succ[sg.patch_id].add(q)
    return succ


def drop_back_edges(succ: dict[int, set[int]]) -> tuple[dict[int, set[int]], bool]:
    """DFS from ascending ids; returns the graph without back edges."""
    WHITE, GREY, BLACK = 0, 1, 2
    color = {v: WHITE for v in succ}
    dag = {v: set() for v in succ}
    had_cycle = False
    for root in sorted(succ):
        if color[root] != WHITE:
            continue
        color[root] = GREY
        stack = [(root, iter(sorted(succ[root])))]
        while stack:
            v, it = stack[-1]
            for w in it:
                if color[w] == GREY:
                    had_cycle = True
                    continue
                dag[v].add(w)
                if color[w] == WHITE:
                    color[w] = GREY
                    stack.append((w, iter(sorted(succ[w]))))
                    break
            else:
                color[v] = BLACK
                stack.pop()
    return dag, had_cycle


def _dag_order(dag: dict[int, set[int]]) -> list[int]:
    deg = {v: 0 for v in dag}
    for v in dag:
        for w in dag[v]:
            deg[w] += 1
    heap = [v for v, d in deg.items() if d == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        v = heapq.heappop(heap)
        out.append(v)
        for w in dag[v]:
            deg[w] -= 1
            if deg[w] == 0:
                heapq.heappush(heap, w)
    return out


def compute_patch_priority(
    subgraphs: list[PatchSubgraph],
    strategy: Strategy | str,
    patch_process: dict[int, int] | None = None,
) -> dict[int, int]:
    """Patch priorities for one angle over the patch condensation graph.

    Patch-level cycles are legal; they are broken by ignoring DFS back edges.
    """
    strategy = Strategy(strategy)
    dag, _ = drop_back_edges(patch_condensation(subgraphs))
    order = _dag_order(dag)
    indeg = {v: 0 for v in dag}
    for v in dag:
        for w in dag[v]:
            indeg[w] += 1
    sources = [v for v, d in indeg.items() if d == 0]
    depth = _bfs_depth(sources, lambda v: sorted(dag[v]))
    bfs = {v: -depth[v] for v in dag}
    if strategy is Strategy.LDCP:
        return _longest_to_sink(dag, lambda v: dag[v], order)
    if strategy is Strategy.BFS:
        return bfs
    if patch_process is None:
        return bfs
    boundary = {v for v in dag if any(patch_process[w] != patch_process[v] for w in dag[v])}
    if not boundary:
        return bfs
    pred: dict[int, list[int]] = {v: [] for v in dag}
    for v in dag:
        for w in dag[v]:
            pred[w].append(v)
    dist = _distance_to_set(set(dag), boundary, lambda v: sorted(pred[v]))
    offset = max(dist.values()) + 1
    return {v: -dist[v] if v in dist else -offset for v in dag}


@dataclass
class PriorityAssignment:
    """Two-level priorities: angle dominates patch, patch orders programs."""

    strategy: Strategy
    vertex_priority: dict[int, dict[int, int]]  # angle -> cell -> priority
    patch_priority: dict[int, dict[int, int]]  # angle -> patch -> priority
    angle_priority: dict[int, int]
    C: int
    shift: int = 0

    def combined(self, patch: int, angle: int) -> int:
        return combined_priority(self, patch, angle)


def make_priority_assignment(
    strategy: Strategy | str,
    vertex_priority: dict[int, dict[int, int]],
    patch_priority: dict[int, dict[int, int]],
) -> PriorityAssignment:
    strategy = Strategy(strategy)
    n_angles = len(patch_priority)
    values = [v for pp in patch_priority.values() for v in pp.values()] or [0]
    shift = -min(values)
    C = 1 + max(v + shift for v in values)
    return PriorityAssignment(
        strategy=strategy,
        vertex_priority=vertex_priority,
        patch_priority=patch_priority,
        angle_priority={a: n_angles - a for a in range(n_angles)},
        C=C,
        shift=shift,
    )


def combined_priority(assignment: PriorityAssignment, patch: int, angle: int) -> int:
    """``prior(a) * C + prior(p)`` with patch priorities shifted to be nonnegative."""
    return assignment.angle_priority[angle] * assignment.C + assignment.patch_priority[angle][patch] + assignment.shift


def subgraph_to_dot(sg: PatchSubgraph) -> str:
    lines = [f'digraph "patch{sg.patch_id}_angle{sg.angle}" {{']
    for v in sg.local_vertices:
        lines.append(f"  c{v};")
    for u, v in sg.local_edges:
        lines.append(f"  c{u} -> c{v};")
    for u, v, p in sg.in_cut_edges:
        lines.append(f'  c{u} -> c{v} [style=dashed, label="from p{p}"];')
    for u, v, p in sg.out_cut_edges:
        lines.append(f'  c{u} -> c{v} [style=dashed, label="to p{p}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
