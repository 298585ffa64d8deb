"""Multigrid reduction in time with FAS coarse grids.

The cycle is written once, from the point of view of a single worker that
owns a contiguous slab of time points (see :mod:`mgrit_adjoint.parallel`).
Running it on one worker gives the serial algorithm; on several, the workers
exchange boundary states through the app's pack/unpack hooks.

Every operation on states goes through ``BraidWorker._step``, ``_clone``,
``_sum``, ``_send``, ``_recv`` and ``access_sweep``. While recording, those
push entries onto the worker's :class:`~mgrit_adjoint.tape.ActionTape`, which
is all the adjoint needs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .app import BraidApp
from .grid import TimeGridSpec, TimeHierarchy, build_hierarchy
from .parallel import Comm, Fabric, Partition, partition, reduce_deterministic, run_workers
from .tape import (
    Action,
    ActionTape,
    GradientAccumulator,
    SlotPool,
    TapeEntry,
    Vector,
    reverse_sweep,
)

log = logging.getLogger(__name__)


class StepError(RuntimeError):
    """A call to the app's step hook failed."""

    def __init__(self, level: int, index: int, message: str):
        super().__init__(f"step to point {index} on level {level} failed: {message}")
        self.level = level
        self.index = index


@dataclass
class SolverConfig:
    tol: float = 1e-9
    max_iter: int = 30
    max_levels: int = 3
    coarsening: int = 4
    min_coarse_points: int = 2
    relaxation: str = "FCF"
    workers: int = 1
    record_tape: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.coarsening < 2:
            raise ValueError("coarsening factor must be >= 2")
        if self.max_levels < 1:
            raise ValueError("max_levels must be >= 1")
        if self.relaxation not in ("F", "FCF"):
            raise ValueError(f"relaxation must be 'F' or 'FCF', not {self.relaxation!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def hierarchy(self, grid: TimeGridSpec) -> TimeHierarchy:
        return build_hierarchy(grid, self.coarsening, self.max_levels, self.min_coarse_points)


@dataclass
class SpaceTimeState:
    """Values at every point of one level, index 0 included."""

    level: int
    values: list

    def copy(self) -> "SpaceTimeState":
        return SpaceTimeState(self.level, [np.array(v, copy=True) for v in self.values])

    def as_array(self) -> np.ndarray:
        return np.stack([np.asarray(v, dtype=float) for v in self.values])


@dataclass
class SolveResult:
    state: SpaceTimeState
    J: float
    residual_history: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.residual_history)


class BraidWorker:
    """One rank's share of the space-time problem, on every level."""

    def __init__(
        self,
        app: BraidApp,
        hierarchy: TimeHierarchy,
        part: Partition,
        comm: Comm,
        design,
        relaxation: str = "FCF",
    ):
        self.app = app
        self.h = hierarchy
        self.m = hierarchy.m
        self.part = part
        self.comm = comm
        self.design = np.asarray(design, dtype=float)
        self.relaxation = relaxation
        self.n_levels = hierarchy.n_levels
        self.ranges = [
            part.level_range(comm.rank, lv.stride, lv.n_points) for lv in hierarchy.levels
        ]
        self.u: list[dict[int, Vector]] = [{} for _ in range(self.n_levels)]
        self.w: list[dict[int, Vector]] = [{} for _ in range(self.n_levels)]
        self.g: list[dict[int, Vector]] = [{} for _ in range(self.n_levels)]
        self.pool = SlotPool()
        self.tape = ActionTape(self.pool)
        self.recording = False

    # -- ownership ---------------------------------------------------------

    def owned(self, level: int) -> range:
        lo, hi = self.ranges[level]
        return range(lo, hi + 1)

    def owner(self, level: int, j: int) -> int:
        return self.part.level_owner(j, self.h[level].stride)

    # -- recorded primitives -------------------------------------------------

    def _vec(self, value) -> Vector:
        return Vector(value, self.pool.new() if self.recording else None)

    def _step(self, vin: Vector, level: int, index: int) -> Vector:
        dt = self.h[level].dt
        try:
            value = self.app.step(vin.value, level, index, dt, self.design)
        except StepError:
            raise
        except Exception as exc:
            raise StepError(level, index, str(exc)) from exc
        out = self._vec(value)
        if self.recording:
            self.tape.record(
                TapeEntry(
                    Action.STEP,
                    (vin.slot, out.slot),
                    level=level,
                    index=index,
                    dt=dt,
                    snapshot=self.app.clone(vin.value),
                )
            )
        return out

    def _clone(self, vin: Vector) -> Vector:
        out = self._vec(self.app.clone(vin.value))
        if self.recording:
            self.tape.record(TapeEntry(Action.CLONE, (vin.slot, out.slot)))
        return out

    def _sum(self, alpha: float, u: Vector, beta: float, v: Vector) -> None:
        v.value = self.app.sum(alpha, u.value, beta, v.value)
        if self.recording:
            self.tape.record(TapeEntry(Action.SUM, (u.slot, v.slot), params=(alpha, beta)))

    def _send(self, vec: Vector, dest: int, tag: tuple) -> None:
        self.comm.send(dest, tag, self.app.pack(vec.value))
        if self.recording:
            self.tape.record(TapeEntry(Action.SEND, (vec.slot,), neighbor=dest, tag=tag))

    def _recv(self, src: int, tag: tuple) -> Vector:
        out = self._vec(self.app.unpack(self.comm.recv(src, tag)))
        if self.recording:
            self.tape.record(TapeEntry(Action.RECV, (out.slot,), neighbor=src, tag=tag))
        return out

    def _advance(self, level: int, prev: Vector, index: int) -> Vector:
        out = self._step(prev, level, index)
        rhs = self.g[level].get(index)
        if rhs is not None:
            self._sum(1.0, rhs, 1.0, out)
        return out

    # -- loading and unloading ----------------------------------------------

    def load(self, level: int, values, rhs=None) -> None:
        self.u[level] = {j: self._vec(values[j]) for j in self.owned(level)}
        if rhs is not None:
            self.g[level] = {
                j: self._vec(rhs[j]) for j in self.owned(level) if rhs[j] is not None
            }

    def load_initial_guess(self) -> None:
        lv = self.h[0]
        self.u[0] = {j: self._vec(self.app.init(lv.time(j))) for j in self.owned(0)}

    def values(self, level: int) -> dict:
        return {j: v.value for j, v in self.u[level].items()}

    def rewrap(self) -> dict[int, Vector]:
        """Give every finest-level state a fresh vector (and slot, when recording)."""
        self.u[0] = {j: self._vec(v.value) for j, v in self.u[0].items()}
        return dict(self.u[0])

    # -- relaxation -----------------------------------------------------------

    def f_relax(self, level: int) -> None:
        lo, hi = self.ranges[level]
        if lo > hi:
            return
        m, n_steps, u = self.m, self.h[level].n_steps, self.u[level]

        segments = []
        i = lo
        if lo % m:
            end = min(hi, (lo // m + 1) * m - 1)
            segments.append((None, lo, end))
            i = end + 1
        while i <= hi:
            end = min(hi, i + m - 1)
            if end > i:
                segments.append((i, i + 1, end))
            i += m

        def run(seg):
            c, first, last = seg
            if c is None:
                prev = self._recv(self.owner(level, first - 1), ("F", level, first))
            else:
                prev = u[c]
            for p in range(first, last + 1):
                u[p] = self._advance(level, prev, p)
                prev = u[p]

        def send():
            self._send(u[hi], self.owner(level, hi + 1), ("F", level, hi + 1))

        if hi < n_steps and (hi + 1) % m:
            # the next rank continues this F-interval, so finish it first
            if hi % m == 0:
                send()
                for seg in segments:
                    run(seg)
            elif segments[-1][0] is not None:
                run(segments[-1])
                send()
                for seg in segments[:-1]:
                    run(seg)
            else:
                for seg in segments:
                    run(seg)
                send()
        else:
            for seg in segments:
                run(seg)

    def c_relax(self, level: int) -> None:
        lo, hi = self.ranges[level]
        if lo > hi:
            return
        m, n_steps, u = self.m, self.h[level].n_steps, self.u[level]
        if hi < n_steps and (hi + 1) % m == 0:
            self._send(u[hi], self.owner(level, hi + 1), ("C", level, hi + 1))
        c = max(lo, 1)
        c += -c % m
        while c <= hi:
            if c == lo:
                prev = self._recv(self.owner(level, c - 1), ("C", level, c))
            else:
                prev = u[c - 1]
            u[c] = self._advance(level, prev, c)
            c += m

    def relax(self, level: int) -> None:
        self.f_relax(level)
        if self.relaxation == "FCF":
            self.c_relax(level)
            self.f_relax(level)

    # -- coarse grid ----------------------------------------------------------

    def restrict(self, level: int) -> None:
        """Inject C-points onto ``level + 1`` and form its FAS right-hand side."""
        m = self.m
        lo, hi = self.ranges[level]
        clo, chi = self.ranges[level + 1]
        n_fine, n_coarse = self.h[level].n_steps, self.h[level + 1].n_steps
        u = self.u[level]

        if lo <= hi and hi < n_fine and (hi + 1) % m == 0:
            self._send(u[hi], self.owner(level, hi + 1), ("R", level, hi + 1))

        v, w, rhs = {}, {}, {}
        for j in range(clo, chi + 1):
            v[j] = self._clone(u[m * j])
            if j:
                w[j] = self._clone(u[m * j])
        self.u[level + 1], self.w[level + 1], self.g[level + 1] = v, w, rhs

        if clo <= chi and chi < n_coarse:
            self._send(v[chi], self.owner(level + 1, chi + 1), ("Rc", level + 1, chi + 1))

        for j in range(max(clo, 1), chi + 1):
            c = m * j
            if c == lo:
                prev = self._recv(self.owner(level, c - 1), ("R", level, c))
            else:
                prev = u[c - 1]
            # fine residual at the C-point: step(u[c-1]) + g[c] - u[c]
            r = self._advance(level, prev, c)
            self._sum(-1.0, u[c], 1.0, r)
            if j == clo:
                vprev = self._recv(self.owner(level + 1, j - 1), ("Rc", level + 1, j))
            else:
                vprev = v[j - 1]
            coarse = self._step(vprev, level + 1, j)
            # plus the coarse operator applied to the injected state
            self._sum(1.0, v[j], 1.0, r)
            self._sum(-1.0, coarse, 1.0, r)
            rhs[j] = r

    def coarse_solve(self, level: int) -> None:
        lo, hi = self.ranges[level]
        if lo > hi:
            return
        u = self.u[level]
        if hi >= max(lo, 1):
            if lo >= 1:
                prev = self._recv(self.owner(level, lo - 1), ("S", level, lo))
            else:
                prev = u[0]
            for j in range(max(lo, 1), hi + 1):
                u[j] = self._advance(level, prev, j)
                prev = u[j]
        if hi < self.h[level].n_steps:
            self._send(u[hi], self.owner(level, hi + 1), ("S", level, hi + 1))

    def correct(self, level: int) -> None:
        """Add the coarse-grid change back onto the C-points of ``level``."""
        clo, chi = self.ranges[level + 1]
        v, w, u = self.u[level + 1], self.w[level + 1], self.u[level]
        for j in range(max(clo, 1), chi + 1):
            err = w[j]
            self._sum(1.0, v[j], -1.0, err)
            self._sum(1.0, err, 1.0, u[self.m * j])
        self.u[level + 1], self.w[level + 1], self.g[level + 1] = {}, {}, {}

    # -- one cycle -------------------------------------------------------------

    def iteration(self) -> None:
        top = self.n_levels - 1
        for level in range(top):
            self.relax(level)
            self.restrict(level)
        self.coarse_solve(top)
        for level in reversed(range(top)):
            self.correct(level)
            self.f_relax(level)

    def access_sweep(self) -> list:
        terms = []
        for i, vec in self.u[0].items():
            if i == 0:
                continue
            terms.append(float(self.app.access(vec.value, i, self.design)))
            if self.recording:
                self.tape.record(
                    TapeEntry(
                        Action.ACCESS, (vec.slot,), index=i, snapshot=self.app.clone(vec.value)
                    )
                )
        return terms

    def change_terms(self, old: dict) -> list:
        app = self.app
        out = []
        for i, vec in self.u[0].items():
            if i:
                d = app.norm(app.sum(1.0, vec.value, -1.0, old[i]))
                out.append(d * d)
        return out

    # -- drivers ---------------------------------------------------------------

    def run_solve(self, tol: float, max_iter: int) -> dict:
        comm = self.comm
        history = []
        converged = False
        for _ in range(max_iter):
            old = self.values(0)
            self.iteration()
            res = float(np.sqrt(comm.allreduce(self.change_terms(old))))
            history.append(res)
            log.debug("iteration %d residual %.3e", len(history), res)
            if res < tol:
                converged = True
                break
        J = comm.allreduce(self.access_sweep())
        return {"values": self.values(0), "J": J, "history": history, "converged": converged}

    def taped_iteration(self):
        """Run one recorded cycle; return input vectors, output vectors and J terms."""
        self.recording = True
        inputs = self.rewrap()
        try:
            self.iteration()
            terms = self.access_sweep()
        finally:
            self.recording = False
        return inputs, dict(self.u[0]), terms

    def reverse(self, inputs: dict, outputs: dict, seed: dict, bar_J: float = 1.0):
        """Sweep the tape back with ``seed`` on the outputs.

        Returns the adjoints at the inputs (index 0 excluded) and the
        gradient terms collected on this rank.
        """
        for i, vec in outputs.items():
            if i and seed.get(i) is not None:
                vec.slot.set(seed[i])
        grad = GradientAccumulator(self.design.size, bar_J_seed=bar_J)
        reverse_sweep(self.tape, self.app, self.design, grad, self.comm)
        bar = {}
        for i, vec in inputs.items():
            if i:
                val = vec.slot.value
                bar[i] = self.app.zero(vec.value) if val is None else val
        for vec in outputs.values():
            if vec.slot is not None:
                vec.slot.clear()
        # drop the slots of the finest-level states
        self.u[0] = {j: Vector(v.value) for j, v in self.u[0].items()}
        return bar, grad.terms


# -- public operations on whole levels ----------------------------------------


def _spmd(app, hierarchy, design, workers, body, relaxation="FCF"):
    part = partition(hierarchy.spec.n_points, workers)

    def target(comm):
        wk = BraidWorker(app, hierarchy, part, comm, design, relaxation)
        return wk, body(wk)

    return run_workers(workers, target)


def _gather(results, level, n_points):
    out = [None] * n_points
    for wk, _ in results:
        for j, v in wk.u[level].items():
            out[j] = v.value
    return out


def _level_op(app, hierarchy, level, state, design, workers, op, rhs=None):
    if state.level != level:
        raise ValueError(f"state lives on level {state.level}, not {level}")

    def body(wk):
        wk.load(level, state.values, rhs)
        op(wk)

    res = _spmd(app, hierarchy, design, workers, body)
    return SpaceTimeState(level, _gather(res, level, hierarchy[level].n_points))


def f_relax(app, hierarchy, level, state, design, rhs=None, workers=1) -> SpaceTimeState:
    return _level_op(app, hierarchy, level, state, design, workers, lambda w: w.f_relax(level), rhs)


def c_relax(app, hierarchy, level, state, design, rhs=None, workers=1) -> SpaceTimeState:
    return _level_op(app, hierarchy, level, state, design, workers, lambda w: w.c_relax(level), rhs)


def fcf_relax(app, hierarchy, level, state, design, rhs=None, workers=1) -> SpaceTimeState:
    def op(w):
        w.f_relax(level)
        w.c_relax(level)
        w.f_relax(level)

    return _level_op(app, hierarchy, level, state, design, workers, op, rhs)


def restrict_fas(app, hierarchy, level, state, design, rhs=None, workers=1):
    """Return the injected coarse state and the coarse FAS right-hand side.

    ``state`` should have been relaxed on ``level`` already. The right-hand
    side list holds None at index 0.
    """
    if level + 1 >= hierarchy.n_levels:
        raise ValueError("no coarser level to restrict to")

    def body(wk):
        wk.load(level, state.values, rhs)
        wk.restrict(level)

    res = _spmd(app, hierarchy, design, workers, body)
    n = hierarchy[level + 1].n_points
    coarse = _gather(res, level + 1, n)
    g = [None] * n
    for wk, _ in res:
        for j, vec in wk.g[level + 1].items():
            g[j] = vec.value
    return SpaceTimeState(level + 1, coarse), g


def coarse_solve(app, hierarchy, level, state, rhs, design, workers=1) -> SpaceTimeState:
    """Forward substitution ``v[j] = step(v[j-1]) + rhs[j]`` on ``level``."""
    return _level_op(
        app, hierarchy, level, state, design, workers, lambda w: w.coarse_solve(level), rhs
    )


def initial_guess(app, hierarchy) -> SpaceTimeState:
    lv = hierarchy[0]
    return SpaceTimeState(0, [app.init(lv.time(j)) for j in range(lv.n_points)])


def mgrit_iteration(app, hierarchy, state, design, config: SolverConfig | None = None):
    """Apply one V-cycle to a finest-level state; return ``(new_state, J)``.

    J is the objective accumulated by ``access`` over the new state.
    """
    config = config or SolverConfig()

    def body(wk):
        wk.load(0, state.values)
        wk.iteration()
        return wk.comm.allreduce(wk.access_sweep())

    res = _spmd(app, hierarchy, design, config.workers, body, config.relaxation)
    return SpaceTimeState(0, _gather(res, 0, hierarchy[0].n_points)), res[0][1]


class TapedIteration:
    """A recorded V-cycle on a single worker, ready to be reversed once."""

    def __init__(self, app, hierarchy, state, design, config: SolverConfig | None = None):
        config = config or SolverConfig()
        part = partition(hierarchy.spec.n_points, 1)
        comm = Comm(Fabric(1), 0)
        self.worker = BraidWorker(app, hierarchy, part, comm, design, config.relaxation)
        self.worker.load(0, state.values)
        self.inputs, self.outputs, terms = self.worker.taped_iteration()
        self.J = reduce_deterministic([terms])
        self.output = SpaceTimeState(
            0, [self.outputs[j].value for j in range(hierarchy[0].n_points)]
        )

    @property
    def tape(self) -> ActionTape:
        return self.worker.tape

    def reverse(self, seed, bar_J: float = 1.0):
        """Return ``(bar_u_next, bar_rho)``; ``seed`` is indexed like the state."""
        if self.inputs is None:
            raise RuntimeError("this iteration has already been reversed")
        seed_map = {i: seed[i] for i in range(1, len(seed)) if seed[i] is not None}
        bar, terms = self.worker.reverse(self.inputs, self.outputs, seed_map, bar_J)
        self.inputs = self.outputs = None
        n = len(bar) + 1
        bar_list = [None] + [bar[i] for i in range(1, n)]
        grad = np.asarray(
            reduce_deterministic([terms]) if terms else np.zeros(self.worker.design.size),
            dtype=float,
        ).reshape(self.worker.design.size)
        return bar_list, grad


def solve(app, grid: TimeGridSpec, design, config: SolverConfig | None = None) -> SolveResult:
    """Iterate V-cycles from the initial guess until the change drops below ``tol``."""
    config = config or SolverConfig()
    hierarchy = config.hierarchy(grid)

    def body(wk):
        wk.load_initial_guess()
        return wk.run_solve(config.tol, config.max_iter)

    res = _spmd(app, hierarchy, design, config.workers, body, config.relaxation)
    values = [None] * hierarchy[0].n_points
    for _, out in res:
        values_part = out["values"]
        for j, v in values_part.items():
            values[j] = v
    head = res[0][1]
    if not head["converged"] and config.max_iter > 0:
        log.warning(
            "MGRIT stopped after %d iterations with residual %.3e (tol %.1e)",
            len(head["history"]),
            head["history"][-1] if head["history"] else float("nan"),
            config.tol,
        )
    return SolveResult(SpaceTimeState(0, values), head["J"], head["history"], head["converged"])
