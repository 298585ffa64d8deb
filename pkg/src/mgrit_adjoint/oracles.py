"""Reference computations used to check the MGRIT solver and its adjoint.

These are deliberately naive: plain time-serial loops over the app hooks,
nothing shared with the multigrid or tape code. They are slow and exact,
which is the point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FDSpec:
    epsilon: float = 1e-6
    scheme: str = "forward"
    direction: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.scheme not in ("forward", "central"):
            raise ValueError(f"unknown difference scheme {self.scheme!r}")
        if self.direction < 0:
            raise ValueError("direction must be a non-negative index")


def sequential_forward(app, grid, design):
    """Step from the initial condition through every point of ``grid``.

    Returns the trajectory (a list of N+1 states) and the objective, which
    collects ``access`` at points 1..N.
    """
    design = np.asarray(design, dtype=float)
    dt = grid.dt
    traj = [app.init(grid.time(0))]
    contributions = []
    for i in range(1, grid.n_steps + 1):
        traj.append(app.step(traj[-1], 0, i, dt, design))
        contributions.append(float(app.access(traj[-1], i, design)))
    return traj, math.fsum(contributions)


def sequential_adjoint(app, grid, design, trajectory=None, bar_J=1.0, return_adjoints=False):
    """Gradient of the objective by the classical backward-in-time sweep.

    With ``return_adjoints`` the adjoint states at points 0..N are returned
    as well (entry i is the sensitivity of J to u^i, all later dependence
    included).
    """
    design = np.asarray(design, dtype=float)
    if trajectory is None:
        trajectory, _ = sequential_forward(app, grid, design)
    dt = grid.dt
    N = grid.n_steps
    terms = []
    bars = [None] * (N + 1)
    bar = None
    for i in range(N, 0, -1):
        inc_u, inc_rho = app.access_adjoint(trajectory[i], i, design, bar_J)
        terms.append(np.asarray(inc_rho, dtype=float))
        bar = inc_u if bar is None else bar + inc_u
        bars[i] = bar
        bar, inc_rho = app.step_adjoint(trajectory[i - 1], 0, i, dt, design, bar)
        terms.append(np.asarray(inc_rho, dtype=float))
    bars[0] = bar
    if terms:
        stacked = np.stack([t.reshape(design.size) for t in terms])
        grad = np.array([math.fsum(stacked[:, k]) for k in range(design.size)])
    else:
        grad = np.zeros(design.size)
    if return_adjoints:
        return grad, bars
    return grad


def finite_difference_gradient(app, grid, design, fd: FDSpec = FDSpec()) -> float:
    """Difference quotient of J along design direction ``fd.direction``."""
    design = np.asarray(design, dtype=float)
    if fd.direction >= design.size:
        raise ValueError(f"direction {fd.direction} outside a design of size {design.size}")
    e = np.zeros_like(design)
    e[fd.direction] = fd.epsilon
    _, J_plus = sequential_forward(app, grid, design + e)
    if fd.scheme == "forward":
        _, J_0 = sequential_forward(app, grid, design)
        return (J_plus - J_0) / fd.epsilon
    _, J_minus = sequential_forward(app, grid, design - e)
    return (J_plus - J_minus) / (2.0 * fd.epsilon)


def dense_iteration_jacobian(app, hierarchy, state, design, config=None, eps=1e-6) -> np.ndarray:
    """Central-difference Jacobian of one V-cycle with respect to its input.

    Rows and columns run over the finest points 1..N, each state flattened.
    Meant for tiny problems only: it costs two V-cycles per column.
    """
    from .core import SpaceTimeState, mgrit_iteration

    values = [np.asarray(v, dtype=float) for v in state.values]
    sizes = [v.size for v in values[1:]]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1])
    if n > 2000:
        raise ValueError(f"{n} unknowns is too many for a dense Jacobian")

    def run(flat):
        vals = [values[0]] + [
            flat[offsets[i] : offsets[i + 1]].copy() for i in range(len(sizes))
        ]
        out, _ = mgrit_iteration(app, hierarchy, SpaceTimeState(0, vals), design, config)
        return np.concatenate([np.ravel(v) for v in out.values[1:]])

    x0 = np.concatenate([np.ravel(v) for v in values[1:]])
    jac = np.empty((n, n))
    for k in range(n):
        d = np.zeros(n)
        d[k] = eps
        jac[:, k] = (run(x0 + d) - run(x0 - d)) / (2.0 * eps)
    return jac
