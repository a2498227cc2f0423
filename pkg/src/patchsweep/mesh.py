"""Meshes, patch decompositions and discrete-ordinate direction sets.

Structured meshes are lowered into the same cell/face representation used for
unstructured ones, so everything downstream only ever sees ``Mesh``.
"""

from __future__ import annotations

import json
import math
import sys
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BOUNDARY = -1

# Face order for hexahedral cells produced by build_structured_mesh.
HEX_NORMALS = (
    (-1.0, 0.0, 0.0),
    (1.0, 0.0, 0.0),
    (0.0, -1.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, -1.0),
    (0.0, 0.0, 1.0),
)


class MeshError(ValueError):
    pass


class CapacityError(MeshError):
    pass


@dataclass(frozen=True)
class StructuredMeshSpec:
    dims: tuple[int, int, int]
    cell_extent: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise MeshError(f"dims must be 3 positive integers, got {self.dims!r}")
        if len(self.cell_extent) != 3 or any(not e > 0 for e in self.cell_extent):
            raise MeshError(f"cell_extent must be 3 positive reals, got {self.cell_extent!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "cell_extent", tuple(float(e) for e in self.cell_extent))


@dataclass(frozen=True)
class Face:
    area: float
    normal: tuple[float, float, float]
    neighbor: int = BOUNDARY


@dataclass(frozen=True)
class Cell:
    cell_id: int
    centroid: tuple[float, float, float]
    faces: tuple[Face, ...]
    volume: float = 1.0


@dataclass(frozen=True)
class Mesh:
    """Cells with face geometry. ``structured`` survives only as metadata."""

    cells: tuple[Cell, ...]
    structured: StructuredMeshSpec | None = None

    def __len__(self):
        return len(self.cells)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def neighbors(self, cell_id: int) -> list[int]:
        return [f.neighbor for f in self.cells[cell_id].faces if f.neighbor != BOUNDARY]

    def validate(self) -> None:
        """Check dense ids, unit normals and symmetric face adjacency."""
        for i, cell in enumerate(self.cells):
            if cell.cell_id != i:
                raise MeshError(f"cell ids must be dense 0..N-1; position {i} holds id {cell.cell_id}")
            if not cell.volume > 0:
                raise MeshError(f"cell {i} has non-positive volume {cell.volume}")
            for f in cell.faces:
                if abs(math.sqrt(sum(x * x for x in f.normal)) - 1.0) > 1e-9:
                    raise MeshError(f"cell {i} has a non-unit face normal {f.normal}")
                if not f.area > 0:
                    raise MeshError(f"cell {i} has a face with non-positive area")
                if f.neighbor == BOUNDARY:
                    continue
                if not 0 <= f.neighbor < len(self.cells):
                    raise MeshError(f"cell {i} references unknown neighbor {f.neighbor}")
                if f.neighbor == i:
                    raise MeshError(f"cell {i} lists itself as a neighbor")
                if i not in self.neighbors(f.neighbor):
                    raise MeshError(f"adjacency {i}->{f.neighbor} is not symmetric")

    def to_json(self) -> dict:
        return {
            "cells": [
                {
                    "id": c.cell_id,
                    "centroid": list(c.centroid),
                    "volume": c.volume,
                    "faces": [
                        {
                            "area": f.area,
                            "normal": list(f.normal),
                            "neighbor": None if f.neighbor == BOUNDARY else f.neighbor,
                        }
                        for f in c.faces
                    ],
                }
                for c in self.cells
            ]
        }


def mesh_from_json(doc: dict) -> Mesh:
    """Parse ``{cells: [{id, centroid, volume?, faces: [{area, normal, neighbor}]}]}``.

    A neighbor of ``null`` or ``-1`` marks a boundary face.
    """
    try:
        raw = sorted(doc["cells"], key=lambda c: int(c["id"]))
        cells = []
        for c in raw:
            faces = []
            for f in c["faces"]:
                nb = f.get("neighbor")
                faces.append(
                    Face(
                        area=float(f["area"]),
                        normal=tuple(float(x) for x in f["normal"]),
                        neighbor=BOUNDARY if nb is None else int(nb),
                    )
                )
            cells.append(
                Cell(
                    cell_id=int(c["id"]),
                    centroid=tuple(float(x) for x in c["centroid"]),
                    faces=tuple(faces),
                    volume=float(c.get("volume", 1.0)),
                )
            )
    except (KeyError, TypeError) as exc:
        raise MeshError(f"malformed mesh document: {exc}") from exc
    if not cells:
        raise MeshError("mesh has no cells")
    mesh = Mesh(tuple(cells))
    mesh.validate()
    return mesh


def load_mesh(path) -> Mesh:
    return mesh_from_json(json.loads(Path(path).read_text()))


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(json.dumps(mesh.to_json()))


def structured_index(spec: StructuredMeshSpec, i: int, j: int, k: int) -> int:
    nx, ny, _ = spec.dims
    return i + nx * (j + ny * k)


def build_structured_mesh(spec: StructuredMeshSpec) -> Mesh:
    nx, ny, nz = spec.dims
    n = nx * ny * nz
    if n > sys.maxsize:
        raise CapacityError(f"{nx}x{ny}x{nz} cells exceeds addressable range")
    dx, dy, dz = spec.cell_extent
    areas = (dy * dz, dy * dz, dx * dz, dx * dz, dx * dy, dx * dy)
    volume = dx * dy * dz
    cells = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                nbrs = (
                    i - 1 if i > 0 else None,
                    i + 1 if i < nx - 1 else None,
                    j - 1 if j > 0 else None,
                    j + 1 if j < ny - 1 else None,
                    k - 1 if k > 0 else None,
                    k + 1 if k < nz - 1 else None,
                )
                ids = []
                for axis, v in enumerate(nbrs):
                    if v is None:
                        ids.append(BOUNDARY)
                    elif axis < 2:
                        ids.append(structured_index(spec, v, j, k))
                    elif axis < 4:
                        ids.append(structured_index(spec, i, v, k))
                    else:
                        ids.append(structured_index(spec, i, j, v))
                faces = tuple(Face(areas[f], HEX_NORMALS[f], ids[f]) for f in range(6))
                centroid = ((i + 0.5) * dx, (j + 0.5) * dy, (k + 0.5) * dz)
                cells.append(Cell(len(cells), centroid, faces, volume))
    return Mesh(tuple(cells), structured=spec)


def mesh_from_edges(n_cells: int, edges, volume: float = 1.0) -> Mesh:
    """Realize a directed graph as a mesh swept by any direction with positive x.

    Each edge ``(u, v)`` becomes a shared face with normal +x on ``u`` and -x on
    ``v``. Used for hand-built fixtures whose dependency graph is known a priori.
    """
    faces: list[list[Face]] = [[] for _ in range(n_cells)]
    level = [0] * n_cells
    for u, v in sorted(edges):
        faces[u].append(Face(1.0, (1.0, 0.0, 0.0), v))
        faces[v].append(Face(1.0, (-1.0, 0.0, 0.0), u))
    # centroids only need to look plausible: x by longest-path level
    order = sorted(edges)
    for _ in range(n_cells):
        changed = False
        for u, v in order:
            if level[v] < level[u] + 1:
                level[v] = level[u] + 1
                changed = True
        if not changed:
            break
    cells = tuple(
        Cell(c, (float(level[c]), float(c), 0.0), tuple(faces[c]), volume) for c in range(n_cells)
    )
    mesh = Mesh(cells)
    mesh.validate()
    return mesh


def toy_unstructured_mesh(n_points: int = 160, seed: int = 7, radius: float = 1.0) -> Mesh:
    """Tetrahedral mesh of a ball from a Delaunay triangulation of random points.

    Delaunay complexes are acyclic under every sweep direction, which makes them
    safe desk-scale stand-ins for real unstructured meshes.
    """
    from scipy.spatial import Delaunay

    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n_points:
        p = rng.uniform(-radius, radius, size=3)
        if p @ p <= radius * radius:
            pts.append(p)
    points = np.array(pts)
    tri = Delaunay(points)
    tets = tri.simplices
    vol = np.abs(np.einsum(
        "ij,ij->i",
        points[tets[:, 1]] - points[tets[:, 0]],
        np.cross(points[tets[:, 2]] - points[tets[:, 0]], points[tets[:, 3]] - points[tets[:, 0]]),
    )) / 6.0
    keep = vol > 1e-9 * radius**3
    tets = tets[keep]
    vol = vol[keep]
    centroids = points[tets].mean(axis=1)

    shared: dict[tuple[int, int, int], list[tuple[int, int]]] = {}
    for t, tet in enumerate(tets):
        for f in range(4):
            key = tuple(sorted(int(x) for i, x in enumerate(tet) if i != f))
            shared.setdefault(key, []).append((t, f))

    faces: list[list[Face | None]] = [[None] * 4 for _ in range(len(tets))]
    for key, owners in shared.items():
        a, b, c = (points[i] for i in key)
        cross = np.cross(b - a, c - a)
        area = 0.5 * float(np.linalg.norm(cross))
        normal = cross / np.linalg.norm(cross)
        t0, f0 = owners[0]
        if normal @ (a - centroids[t0]) < 0:
            normal = -normal
        n = tuple(float(x) for x in normal)
        neg = tuple(-x for x in n)
        if len(owners) == 1:
            faces[t0][f0] = Face(area, n, BOUNDARY)
        else:
            t1, f1 = owners[1]
            faces[t0][f0] = Face(area, n, t1)
            faces[t1][f1] = Face(area, neg, t0)
    cells = tuple(
        Cell(t, tuple(float(x) for x in centroids[t]), tuple(faces[t]), float(vol[t]))
        for t in range(len(tets))
    )
    mesh = Mesh(cells)
    mesh.validate()
    return mesh


@dataclass(frozen=True)
class Patch:
    patch_id: int
    local_cells: frozenset[int]
    ghost_cells: frozenset[int]
    owner_of_ghost: dict[int, int] = field(hash=False)


@dataclass(frozen=True)
class Decomposition:
    mesh: Mesh
    patches: tuple[Patch, ...]
    patch_of_cell: tuple[int, ...]
    patch_adjacency: dict[int, frozenset[int]] = field(hash=False)

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    def validate(self) -> None:
        seen = set()
        for p in self.patches:
            if seen & p.local_cells:
                raise MeshError(f"patch {p.patch_id} overlaps another patch")
            seen |= p.local_cells
            if p.local_cells & p.ghost_cells:
                raise MeshError(f"patch {p.patch_id} has a cell both local and ghost")
            for c in p.local_cells:
                if self.patch_of_cell[c] != p.patch_id:
                    raise MeshError(f"patch_of_cell[{c}] disagrees with patch {p.patch_id}")
        if seen != set(range(self.mesh.n_cells)):
            raise MeshError("patches do not cover the mesh")
        for p, adj in self.patch_adjacency.items():
            for q in adj:
                if p not in self.patch_adjacency[q]:
                    raise MeshError(f"patch adjacency {p}-{q} is not symmetric")


def decomposition_from_labels(mesh: Mesh, labels: list[int]) -> Decomposition:
    n_patches = max(labels) + 1
    local: list[set[int]] = [set() for _ in range(n_patches)]
    ghosts: list[dict[int, int]] = [{} for _ in range(n_patches)]
    adjacency: list[set[int]] = [set() for _ in range(n_patches)]
    for c, p in enumerate(labels):
        local[p].add(c)
        for nb in mesh.neighbors(c):
            q = labels[nb]
            if q != p:
                ghosts[p][nb] = q
                adjacency[p].add(q)
    patches = tuple(
        Patch(p, frozenset(local[p]), frozenset(ghosts[p]), dict(ghosts[p])) for p in range(n_patches)
    )
    return Decomposition(
        mesh=mesh,
        patches=patches,
        patch_of_cell=tuple(labels),
        patch_adjacency={p: frozenset(adjacency[p]) for p in range(n_patches)},
    )


def decompose_structured(mesh: Mesh, patch_dims) -> Decomposition:
    """Axis-aligned blocks; the last block along an axis may be smaller."""
    spec = mesh.structured
    if spec is None:
        raise MeshError("decompose_structured needs a mesh built by build_structured_mesh")
    patch_dims = tuple(int(d) for d in patch_dims)
    if len(patch_dims) != 3 or any(d < 1 for d in patch_dims):
        raise MeshError(f"patch_dims must be 3 positive integers, got {patch_dims!r}")
    nx, ny, nz = spec.dims
    px, py, pz = patch_dims
    nbx, nby = -(-nx // px), -(-ny // py)
    labels = [0] * mesh.n_cells
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                labels[structured_index(spec, i, j, k)] = i // px + nbx * (j // py + nby * (k // pz))
    return decomposition_from_labels(mesh, labels)


def decompose_unstructured(mesh: Mesh, target_cells_per_patch: int, seed: int = 0) -> Decomposition:
    """Greedy BFS growth from the lowest unassigned cell id.

    Growth is deterministic; ``seed`` is ignored.
    """
    del seed
    if mesh.n_cells == 0:
        raise MeshError("cannot decompose an empty mesh")
    if target_cells_per_patch < 1:
        raise MeshError("target_cells_per_patch must be >= 1")
    labels = [-1] * mesh.n_cells
    patch = 0
    for start in range(mesh.n_cells):
        if labels[start] != -1:
            continue
        size = 0
        queue = deque([start])
        labels[start] = patch
        while queue and size < target_cells_per_patch:
            c = queue.popleft()
            size += 1
            for nb in sorted(mesh.neighbors(c)):
                if labels[nb] == -1 and size + len(queue) < target_cells_per_patch:
                    labels[nb] = patch
                    queue.append(nb)
        patch += 1
    return decomposition_from_labels(mesh, labels)


@dataclass(frozen=True)
class DirectionSet:
    directions: tuple[tuple[float, float, float], ...]
    weights: tuple[float, ...]
    order: int

    def __len__(self):
        return len(self.directions)

    @property
    def n_angles(self) -> int:
        return len(self.directions)


# First ordinate cosine of the classic level-symmetric sets.
_LS_MU1 = {4: 0.3500212, 6: 0.2666355, 8: 0.2182179, 10: 0.1893213, 12: 0.1672126, 14: 0.1519859, 16: 0.1389568}

_OCTANTS = tuple((sx, sy, sz) for sz in (1, -1) for sy in (1, -1) for sx in (1, -1))


def level_symmetric_directions(n: int) -> DirectionSet:
    """Level-symmetric Sn ordinates with uniform weights."""
    if n < 2 or n % 2:
        raise MeshError(f"Sn order must be an even integer >= 2, got {n}")
    half = n // 2
    if n == 2:
        mu = [1.0 / math.sqrt(3.0)]
    else:
        mu1_sq = _LS_MU1.get(n, math.sqrt(1.0 / (3.0 * (n - 1)))) ** 2
        delta = 2.0 * (1.0 - 3.0 * mu1_sq) / (n - 2)
        mu = [math.sqrt(mu1_sq + i * delta) for i in range(half)]
    points = []
    for i in range(half):
        for j in range(half - i):
            k = half - 1 - i - j
            v = np.array([mu[i], mu[j], mu[k]])
            points.append(v / np.linalg.norm(v))
    dirs = []
    for signs in _OCTANTS:
        for p in points:
            dirs.append(tuple(float(s * x) for s, x in zip(signs, p)))
    w = 1.0 / len(dirs)
    return DirectionSet(tuple(dirs), tuple([w] * len(dirs)), n)


def custom_directions(vectors) -> DirectionSet:
    """Uniformly weighted direction set from arbitrary (normalized) vectors."""
    dirs = []
    for v in vectors:
        v = np.asarray(v, dtype=float)
        dirs.append(tuple(float(x) for x in v / np.linalg.norm(v)))
    if not dirs:
        raise MeshError("direction set is empty")
    w = 1.0 / len(dirs)
    return DirectionSet(tuple(dirs), tuple([w] * len(dirs)), 0)
