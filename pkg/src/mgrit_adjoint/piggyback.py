"""Simultaneous primal and adjoint iteration.

Each sweep records one V-cycle ``u_{k+1} = H(u_k)`` and immediately replays
it backwards with the current adjoint as seed, which gives
``bar_{k+1} = (dH/du)^T (bar_k + grad_u J)`` and the matching design
gradient. Both sequences converge together; at the fixed point the gradient
is the exact derivative of the discrete objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import BraidWorker, SolverConfig, SpaceTimeState
from .grid import TimeGridSpec
from .parallel import partition, run_workers

log = logging.getLogger(__name__)


@dataclass
class PiggybackState:
    u: SpaceTimeState
    bar_u: list
    J: float
    grad: np.ndarray
    primal_history: list = field(default_factory=list)
    adjoint_history: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.primal_history)


def _as_gradient(total, size):
    # a sweep that produced no terms at all reduces to the scalar 0.0
    if np.ndim(total) == 0:
        return np.zeros(size)
    return np.asarray(total, dtype=float).reshape(size)


def _worker_loop(wk: BraidWorker, tol: float, max_iter: int):
    comm, app = wk.comm, wk.app
    p = wk.design.size
    wk.load_initial_guess()
    bar = {i: None for i in wk.owned(0) if i}
    J = comm.allreduce(wk.access_sweep())
    grad = np.zeros(p)
    primal, adjoint = [], []
    converged = False
    for _ in range(max_iter):
        old = wk.values(0)
        inputs, outputs, terms = wk.taped_iteration()
        J = comm.allreduce(terms)
        comm.barrier()
        new_bar, grad_terms = wk.reverse(inputs, outputs, bar, bar_J=1.0)
        grad = _as_gradient(comm.allreduce(grad_terms), p)

        change = []
        for i, b in new_bar.items():
            prev = bar[i]
            d = app.norm(b) if prev is None else app.norm(app.sum(1.0, b, -1.0, prev))
            change.append(d * d)
        res_u = float(np.sqrt(comm.allreduce(wk.change_terms(old))))
        res_bar = float(np.sqrt(comm.allreduce(change)))
        bar = new_bar
        primal.append(res_u)
        adjoint.append(res_bar)
        log.debug("piggyback %d: primal %.3e adjoint %.3e", len(primal), res_u, res_bar)
        if res_u < tol and res_bar < tol:
            converged = True
            break
    return {
        "values": wk.values(0),
        "bar": bar,
        "J": J,
        "grad": grad,
        "primal": primal,
        "adjoint": adjoint,
        "converged": converged,
    }


def piggyback_solve(app, grid: TimeGridSpec, design, config: SolverConfig | None = None):
    """Iterate primal and adjoint together until both changes drop below ``tol``."""
    config = config or SolverConfig()
    design = np.asarray(design, dtype=float)
    hierarchy = config.hierarchy(grid)
    part = partition(hierarchy.spec.n_points, config.workers)

    def target(comm):
        wk = BraidWorker(app, hierarchy, part, comm, design, config.relaxation)
        return _worker_loop(wk, config.tol, config.max_iter)

    results = run_workers(config.workers, target)
    n = hierarchy[0].n_points
    values, bar = [None] * n, [None] * n
    for out in results:
        for j, v in out["values"].items():
            values[j] = v
        for j, b in out["bar"].items():
            bar[j] = b
    # the initial point is fixed, and points the sweep never reached carry no adjoint
    bar = [app.zero(values[j]) if b is None else b for j, b in enumerate(bar)]
    head = results[0]
    state = PiggybackState(
        u=SpaceTimeState(0, values),
        bar_u=bar,
        J=head["J"],
        grad=head["grad"],
        primal_history=head["primal"],
        adjoint_history=head["adjoint"],
        converged=head["converged"],
    )
    if not state.converged and config.max_iter > 0:
        log.warning(
            "piggyback stopped after %d iterations: primal residual %.3e, adjoint residual %.3e",
            state.iterations,
            state.primal_history[-1],
            state.adjoint_history[-1],
        )
    return state


def gradient_report(state: PiggybackState, design) -> dict:
    design = np.asarray(design, dtype=float)
    return {
        "design": design.tolist(),
        "J": state.J,
        "gradient": np.asarray(state.grad, dtype=float).tolist(),
        "iterations": state.iterations,
        "primal_residual": state.primal_history[-1] if state.primal_history else None,
        "adjoint_residual": state.adjoint_history[-1] if state.adjoint_history else None,
        "converged": state.converged,
    }
