"""Multigrid reduction in time with a tape-based discrete adjoint."""

from .app import BraidApp
from .core import (
    SolveResult,
    SolverConfig,
    SpaceTimeState,
    StepError,
    TapedIteration,
    c_relax,
    coarse_solve,
    f_relax,
    fcf_relax,
    initial_guess,
    mgrit_iteration,
    restrict_fas,
    solve,
)
from .grid import PointKind, TimeGridSpec, TimeHierarchy, build_hierarchy, classify
from .parallel import Partition, exchange_boundary, partition, reduce_deterministic, run_workers
from .tape import (
    Action,
    ActionTape,
    AdjointSlot,
    GradientAccumulator,
    TapeEntry,
    TapeError,
    adjoint_residual,
    reverse_sweep,
)

__all__ = [
    "Action",
    "ActionTape",
    "AdjointSlot",
    "BraidApp",
    "GradientAccumulator",
    "Partition",
    "PointKind",
    "SolveResult",
    "SolverConfig",
    "SpaceTimeState",
    "StepError",
    "TapeEntry",
    "TapeError",
    "TapedIteration",
    "TimeGridSpec",
    "TimeHierarchy",
    "adjoint_residual",
    "build_hierarchy",
    "c_relax",
    "classify",
    "coarse_solve",
    "exchange_boundary",
    "f_relax",
    "fcf_relax",
    "initial_guess",
    "mgrit_iteration",
    "partition",
    "reduce_deterministic",
    "restrict_fas",
    "reverse_sweep",
    "run_workers",
    "solve",
]
