"""Time grids and the coarsening hierarchy used by the multigrid cycle."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class PointKind(str, Enum):
    C = "C"
    F = "F"


@dataclass(frozen=True)
class TimeGridSpec:
    """Uniform time grid ``t_i = t_start + i * dt`` for ``i = 0..n_steps``."""

    t_start: float
    t_final: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not self.t_final > self.t_start:
            raise ValueError("t_final must exceed t_start")

    @classmethod
    def uniform(cls, t_final: float, n_steps: int, t_start: float = 0.0) -> "TimeGridSpec":
        return cls(float(t_start), float(t_final), int(n_steps))

    @property
    def dt(self) -> float:
        return (self.t_final - self.t_start) / self.n_steps

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    def time(self, index: int) -> float:
        return self.t_start + index * self.dt

    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_points) * self.dt


@dataclass(frozen=True)
class Level:
    """One level of the hierarchy.

    ``stride`` is the number of finest-grid steps per step of this level, so
    point ``j`` here sits on top of finest point ``j * stride``.
    """

    index: int
    n_steps: int
    stride: int
    dt: float
    t_start: float
    fine_dt: float

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    def time(self, j: int) -> float:
        # through the finest index so coarse times match their preimages bitwise
        return self.t_start + (j * self.stride) * self.fine_dt


def classify(index: int, m: int) -> PointKind:
    if index < 0:
        raise ValueError("point index must be non-negative")
    return PointKind.C if index % m == 0 else PointKind.F


class TimeHierarchy:
    """Fine grid plus the coarser grids obtained by keeping every m-th point.

    A trailing remainder of fewer than ``m`` points (when the step count is not
    divisible by ``m``) stays as F-points hanging off the last C-point.
    """

    def __init__(self, spec: TimeGridSpec, m: int, levels: list[Level]):
        self.spec = spec
        self.m = m
        self.levels = levels

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> Level:
        return self.levels[level]

    def point_counts(self) -> list[int]:
        return [lv.n_points for lv in self.levels]

    def kind(self, level: int, index: int) -> PointKind:
        if level == self.n_levels - 1:
            # the coarsest grid is solved sequentially and has no C/F split
            return PointKind.C
        return classify(index, self.m)

    def cf_map(self, level: int) -> np.ndarray:
        """Boolean mask over the points of ``level``; True marks C-points."""
        n = self.levels[level].n_points
        if level == self.n_levels - 1:
            return np.ones(n, dtype=bool)
        return np.arange(n) % self.m == 0

    def __repr__(self):
        return f"TimeHierarchy(m={self.m}, points={self.point_counts()})"


def build_hierarchy(
    spec: TimeGridSpec, m: int, max_levels: int, min_coarse_points: int = 2
) -> TimeHierarchy:
    if m < 2:
        raise ValueError(f"coarsening factor must be >= 2, got {m}")
    if max_levels < 1:
        raise ValueError(f"max_levels must be >= 1, got {max_levels}")
    if spec.n_steps < 1:
        raise ValueError("n_steps must be >= 1")

    levels = [Level(0, spec.n_steps, 1, spec.dt, spec.t_start, spec.dt)]
    while len(levels) < max_levels:
        fine = levels[-1]
        n_coarse = fine.n_steps // m
        if n_coarse + 1 < min_coarse_points or n_coarse < 1:
            break
        stride = fine.stride * m
        levels.append(
            Level(len(levels), n_coarse, stride, spec.dt * stride, spec.t_start, spec.dt)
        )
    return TimeHierarchy(spec, m, levels)
