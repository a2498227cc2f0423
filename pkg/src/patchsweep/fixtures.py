"""Small hand-built problems used by tests, the acceptance suite and the CLI."""

from __future__ import annotations

from .mesh import Decomposition, DirectionSet, custom_directions, decomposition_from_labels, mesh_from_edges

# Two patches of eight cells each; edges follow the +x direction.
TWO_PATCH_EDGES = (
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 4),
    (4, 7),
    (5, 6),
    (6, 7),
    (7, 8),
    (8, 9),
    (8, 12),
    (9, 14),
    (12, 13),
    (12, 14),
    (13, 15),
    (14, 10),
    (10, 11),
    (15, 11),
)
TWO_PATCH_CELLS = (
    (0, 1, 2, 3, 4, 9, 10, 14),
    (5, 6, 7, 8, 11, 12, 13, 15),
)


def two_patch_example() -> tuple[Decomposition, DirectionSet]:
    """16-cell, two-patch sweep graph whose cut edges run in both directions."""
    mesh = mesh_from_edges(16, TWO_PATCH_EDGES)
    labels = [0] * 16
    for p, cells in enumerate(TWO_PATCH_CELLS):
        for c in cells:
            labels[c] = p
    return decomposition_from_labels(mesh, labels), custom_directions([(1.0, 0.0, 0.0)])


def chain_example(n: int, volumes=None) -> tuple:
    """``n`` cells in a line, each its own patch when split later."""
    mesh = mesh_from_edges(n, [(i, i + 1) for i in range(n - 1)])
    return mesh, custom_directions([(1.0, 0.0, 0.0)])
