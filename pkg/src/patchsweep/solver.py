"""Single-group Sn source iteration with a step-upwind cell kernel."""

from __future__ import annotations

import heapq
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .mesh import BOUNDARY, Decomposition, DirectionSet, Mesh
from .runtime import Runtime, RuntimeConfig, RuntimeMetrics, SweepProblem
from .sweepgraph import AngleGraph, CycleError, build_angle_graphs, detect_cycles


class DegenerateCellError(ArithmeticError):
    pass


class CrossSectionError(ValueError):
    pass


@dataclass
class CrossSections:
    sigma_t: np.ndarray
    sigma_s: np.ndarray
    q_ext: np.ndarray

    def __post_init__(self):
        self.sigma_t = np.asarray(self.sigma_t, dtype=float)
        self.sigma_s = np.asarray(self.sigma_s, dtype=float)
        self.q_ext = np.asarray(self.q_ext, dtype=float)
        if not self.sigma_t.shape == self.sigma_s.shape == self.q_ext.shape:
            raise CrossSectionError("cross-section arrays differ in length")
        if (self.sigma_t < 0).any() or (self.sigma_s < 0).any() or (self.q_ext < 0).any():
            raise CrossSectionError("cross sections and sources must be nonnegative")
        if (self.sigma_s > self.sigma_t).any():
            raise CrossSectionError("sigma_s exceeds sigma_t in some cell")

    @classmethod
    def uniform(cls, n_cells: int, sigma_t: float, sigma_s: float, q_ext: float) -> "CrossSections":
        return cls(np.full(n_cells, sigma_t), np.full(n_cells, sigma_s), np.full(n_cells, q_ext))

    @classmethod
    def from_json(cls, doc: dict, n_cells: int) -> "CrossSections":
        """``{uniform: {sigma_t, sigma_s, q_ext}}`` or per-cell arrays at top level."""
        if "uniform" in doc:
            u = doc["uniform"]
            return cls.uniform(n_cells, u["sigma_t"], u.get("sigma_s", 0.0), u.get("q_ext", 0.0))
        xs = cls(doc["sigma_t"], doc.get("sigma_s", [0.0] * n_cells), doc.get("q_ext", [0.0] * n_cells))
        if len(xs.sigma_t) != n_cells:
            raise CrossSectionError(f"expected {n_cells} per-cell values, got {len(xs.sigma_t)}")
        return xs

    @classmethod
    def load(cls, path, n_cells: int) -> "CrossSections":
        return cls.from_json(json.loads(Path(path).read_text()), n_cells)


class TransportKernel:
    """Step-upwind cell solve for a fixed scattering source.

    Sums over incoming faces run in ascending face index, so a cell's value does
    not depend on the order in which its upwind neighbours were computed.
    ``boundary`` is either a constant influx or a callable
    ``(cell, face_index, angle) -> influx``.
    """

    def __init__(
        self,
        mesh: Mesh,
        graphs: list[AngleGraph],
        xs: CrossSections,
        boundary: float | Callable[[int, int, int], float] = 0.0,
    ):
        if len(xs.sigma_t) != mesh.n_cells:
            raise CrossSectionError("cross sections do not match the mesh")
        self.graphs = graphs
        self.volume = [c.volume for c in mesh.cells]
        self.qv = [float(q) * v for q, v in zip(xs.q_ext, self.volume)]
        self.tv = [float(t) * v for t, v in zip(xs.sigma_t, self.volume)]
        self.boundary = boundary
        self.scat = [0.0] * mesh.n_cells

    def set_source(self, s_scat) -> None:
        self.scat = [float(s) for s in s_scat]

    def _influx(self, cell: int, face: int, angle: int) -> float:
        b = self.boundary
        return float(b(cell, face, angle)) if callable(b) else float(b)

    def solve_cell(self, angle: int, cell: int, values) -> float:
        num = self.qv[cell] + self.scat[cell] * self.volume[cell]
        den = self.tv[cell]
        for face, nbr, alpha in self.graphs[angle].incoming[cell]:
            psi_in = self._influx(cell, face, angle) if nbr == BOUNDARY else values[nbr]
            num += alpha * psi_in
            den += alpha
        if den == 0.0:
            raise DegenerateCellError(f"cell {cell} angle {angle}: zero total removal")
        return num / den

    def __call__(self, angle: int, cells, values: dict) -> None:
        for c in cells:
            values[c] = self.solve_cell(angle, c, values)


def update_scattering_source(phi: np.ndarray, xs: CrossSections) -> np.ndarray:
    return xs.sigma_s * phi


def scalar_flux(psi: np.ndarray, weights) -> np.ndarray:
    phi = np.zeros(psi.shape[1])
    for m, w in enumerate(weights):
        phi = phi + w * psi[m]
    return phi


@dataclass
class SolutionState:
    psi: np.ndarray
    phi: np.ndarray
    iterations: int
    residual: float
    converged: bool
    residuals: list[float] = field(default_factory=list)
    metrics: RuntimeMetrics | None = None
    sweep_metrics: list[RuntimeMetrics] = field(default_factory=list)
    wall_seconds: float = 0.0

    def to_json(self) -> dict:
        return {
            "psi": self.psi.tolist(),
            "phi": self.phi.tolist(),
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
        }


def oracle_sweep_fields(mesh: Mesh, graphs: list[AngleGraph], kernel: TransportKernel) -> np.ndarray:
    """Kahn traversal per angle with ascending cell-id tie-break."""
    psi = np.empty((len(graphs), mesh.n_cells))
    for a, g in enumerate(graphs):
        deg = list(g.in_degree)
        heap = [c for c in range(g.n_cells) if deg[c] == 0]
        heapq.heapify(heap)
        values: dict[int, float] = {}
        done = 0
        while heap:
            c = heapq.heappop(heap)
            values[c] = kernel.solve_cell(a, c, values)
            done += 1
            for w in g.downwind[c]:
                deg[w] -= 1
                if deg[w] == 0:
                    heapq.heappush(heap, w)
        if done != g.n_cells:
            raise CycleError(a, detect_cycles(g))
        psi[a] = [values[c] for c in range(g.n_cells)]
    return psi


def sequential_oracle_sweep(
    mesh: Mesh,
    directions: DirectionSet,
    xs: CrossSections,
    s_scat: np.ndarray | None = None,
    boundary: float | Callable = 0.0,
) -> SolutionState:
    """Patch-free reference sweep of every angle for a fixed scattering source."""
    graphs = build_angle_graphs(mesh, directions)
    kernel = TransportKernel(mesh, graphs, xs, boundary)
    if s_scat is not None:
        kernel.set_source(s_scat)
    psi = oracle_sweep_fields(mesh, graphs, kernel)
    return SolutionState(psi, scalar_flux(psi, directions.weights), 1, float("nan"), True)


def _iterate(
    sweep: Callable[[np.ndarray], tuple[np.ndarray, RuntimeMetrics | None]],
    weights,
    xs: CrossSections,
    n_cells: int,
    tol: float,
    max_iters: int,
) -> SolutionState:
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    t0 = time.perf_counter()
    phi = np.zeros(n_cells)
    residuals = []
    sweep_metrics = []
    psi = np.zeros((len(weights), n_cells))
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        psi, m = sweep(update_scattering_source(phi, xs))
        if m is not None:
            sweep_metrics.append(m)
        new = scalar_flux(psi, weights)
        residuals.append(float(np.max(np.abs(new - phi))) if n_cells else 0.0)
        phi = new
        if residuals[-1] < tol:
            converged = True
            break
    total = None
    if sweep_metrics:
        total = RuntimeMetrics()
        for m in sweep_metrics:
            total.add(m)
        total.iterations = it
    return SolutionState(
        psi,
        phi,
        it,
        residuals[-1] if residuals else float("nan"),
        converged,
        residuals,
        total,
        sweep_metrics,
        time.perf_counter() - t0,
    )


def source_iteration(
    decomp: Decomposition,
    directions: DirectionSet,
    xs: CrossSections,
    config: RuntimeConfig,
    runtime: Runtime | None = None,
    tol: float = 1e-8,
    max_iters: int = 200,
    boundary: float | Callable = 0.0,
    recorders: list | None = None,
) -> SolutionState:
    """Source iteration with every sweep executed by the patch runtime.

    The first sweep always runs on the fine DAG; with ``config.mode == CG`` the
    following sweeps replay the coarsened graphs recorded by it. Pass a list as
    ``recorders`` to collect one ``KernelRecorder`` per sweep.
    """
    from .patchprog import KernelRecorder

    if runtime is None:
        runtime = Runtime(SweepProblem(decomp, directions), config)
    kernel = TransportKernel(decomp.mesh, runtime.problem.graphs, xs, boundary)

    def sweep(s_scat):
        kernel.set_source(s_scat)
        rec = KernelRecorder() if recorders is not None else None
        res = runtime.sweep(kernel, recorder=rec)
        if rec is not None:
            recorders.append(rec)
        return res.psi, res.metrics

    return _iterate(sweep, directions.weights, xs, decomp.mesh.n_cells, tol, max_iters)


def oracle_source_iteration(
    mesh: Mesh,
    directions: DirectionSet,
    xs: CrossSections,
    tol: float = 1e-8,
    max_iters: int = 200,
    boundary: float | Callable = 0.0,
) -> SolutionState:
    graphs = build_angle_graphs(mesh, directions)
    kernel = TransportKernel(mesh, graphs, xs, boundary)

    def sweep(s_scat):
        kernel.set_source(s_scat)
        return oracle_sweep_fields(mesh, graphs, kernel), None

    return _iterate(sweep, directions.weights, xs, mesh.n_cells, tol, max_iters)


def first_divergence(a: np.ndarray, b: np.ndarray) -> tuple[int, int] | None:
    """First (cell, angle) where two angular-flux arrays differ bitwise (NaN counts as different)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return (-1, -1)
    diff = a.view(np.uint64) != b.view(np.uint64)
    if not diff.any():
        return None
    angles, cells = np.nonzero(diff)
    # report the lowest cell, then the lowest angle on it
    order = np.lexsort((angles, cells))
    i = order[0]
    return int(cells[i]), int(angles[i])
