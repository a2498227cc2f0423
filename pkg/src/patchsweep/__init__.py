"""Patch-centric data-driven sweeps with a desk-scale Sn transport solver."""

from .coarsen import CoarsenedGraph, CoarseSweepProgram, build_coarsened_graph, verify_acyclic
from .mesh import (
    Decomposition,
    DirectionSet,
    Mesh,
    StructuredMeshSpec,
    build_structured_mesh,
    custom_directions,
    decompose_structured,
    decompose_unstructured,
    level_symmetric_directions,
    load_mesh,
    toy_unstructured_mesh,
)
from .patchprog import UNLIMITED, KernelRecorder, PatchProgram, Stream, SweepProgram
from .runtime import DeadlockError, Runtime, RuntimeConfig, SweepProblem, SweepMode, TerminationMode
from .solver import (
    CrossSections,
    SolutionState,
    TransportKernel,
    oracle_source_iteration,
    sequential_oracle_sweep,
    source_iteration,
)
from .sweepgraph import Strategy

__version__ = "0.1.0"
