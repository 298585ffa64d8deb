"""Recording of solver actions and their reverse-mode replay.

Every hook call made during a recorded iteration is pushed onto an
:class:`ActionTape`. Each state vector touched by the solver carries an
:class:`AdjointSlot`; replaying the tape backwards applies the transposed
action of each entry to those slots and to the design gradient.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numba
import numpy as np

from .parallel import reduce_deterministic


class TapeError(RuntimeError):
    """The tape and the slots it references have gone out of sync."""


class Action(str, Enum):
    STEP = "Step"
    ACCESS = "Access"
    CLONE = "Clone"
    SUM = "Sum"
    SEND = "Send"
    RECV = "Recv"


class AdjointSlot:
    """Accumulation buffer for the adjoint of one state vector.

    Increments are kept as a list and only summed when the value is read,
    with a sum that does not depend on the order of the terms. That keeps
    adjoints bitwise identical however the time line is split among
    workers, since a split only changes the order in which the same
    increments arrive. ``live_refs`` counts the owning vector plus every
    tape entry that names the slot.
    """

    __slots__ = ("slot_id", "terms", "live_refs", "pool", "reclaimed")

    def __init__(self, slot_id: int, pool: "SlotPool"):
        self.slot_id = slot_id
        self.terms: list = []
        self.live_refs = 1
        self.pool = pool
        self.reclaimed = False

    @property
    def value(self):
        """The accumulated adjoint, or None while it is zero."""
        if not self.terms:
            return None
        return order_free_sum(self.terms)

    def set(self, value) -> None:
        self.terms = [] if value is None else [value]

    def clear(self) -> None:
        self.terms = []

    def add(self, increment) -> None:
        if increment is not None:
            self.terms.append(increment)

    def __repr__(self):
        return f"AdjointSlot({self.slot_id}, refs={self.live_refs})"


def order_free_sum(terms):
    """Sum arrays so that any permutation of ``terms`` gives the same bits.

    Each component is summed in ascending order of value, which fixes the
    rounding sequence. Two terms need no sorting: IEEE addition commutes.
    """
    if len(terms) == 1:
        return terms[0]
    if len(terms) == 2:
        return terms[0] + terms[1]
    first = terms[0]
    if isinstance(first, np.ndarray) and first.dtype == np.float64:
        stacked = np.array(terms)
        return _sorted_column_sum(stacked.reshape(len(terms), -1)).reshape(first.shape)
    stacked = np.sort(np.stack(terms), axis=0)
    out = stacked[0].copy()
    for row in stacked[1:]:
        out += row
    return out


@numba.njit(cache=True)
def _sorted_column_sum(a):
    k, n = a.shape
    out = np.empty(n)
    col = np.empty(k)
    for j in range(n):
        # insertion sort: k is a handful of terms
        for i in range(k):
            x = a[i, j]
            p = i
            while p > 0 and col[p - 1] > x:
                col[p] = col[p - 1]
                p -= 1
            col[p] = x
        acc = col[0]
        for i in range(1, k):
            acc += col[i]
        out[j] = acc
    return out


class SlotPool:
    """Hands out slots and reclaims them when their last reference goes away."""

    def __init__(self):
        self._ids = itertools.count()
        self.live: dict[int, AdjointSlot] = {}
        self.created = 0
        self.reclaimed = 0

    def new(self) -> AdjointSlot:
        slot = AdjointSlot(next(self._ids), self)
        self.live[slot.slot_id] = slot
        self.created += 1
        return slot

    def acquire(self, slot: AdjointSlot) -> None:
        if slot.reclaimed:
            raise TapeError(f"slot {slot.slot_id} used after it was reclaimed")
        slot.live_refs += 1

    def release(self, slot: AdjointSlot) -> None:
        slot.live_refs -= 1
        if slot.live_refs == 0:
            slot.terms = []
            slot.reclaimed = True
            del self.live[slot.slot_id]
            self.reclaimed += 1
        elif slot.live_refs < 0:
            raise TapeError(f"slot {slot.slot_id} released too often")


class Vector:
    """A state held by the solver, paired with its adjoint slot while recording."""

    __slots__ = ("value", "slot")

    def __init__(self, value, slot: AdjointSlot | None = None):
        self.value = value
        self.slot = slot

    def __del__(self):
        slot = self.slot
        if slot is not None:
            slot.pool.release(slot)


@dataclass(slots=True)
class TapeEntry:
    kind: Action
    slots: tuple
    level: int = 0
    index: int = 0
    dt: float = 0.0
    snapshot: Any = None
    params: tuple = ()
    neighbor: int = -1
    tag: Any = None


class ActionTape:
    """Last-in-first-out record of one worker's hook calls."""

    def __init__(self, pool: SlotPool):
        self.pool = pool
        self.entries: list[TapeEntry] = []
        self.recorded = dict.fromkeys(Action, 0)
        self.popped = dict.fromkeys(Action, 0)

    def __len__(self):
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        for slot in entry.slots:
            self.pool.acquire(slot)
        self.entries.append(entry)
        self.recorded[entry.kind] += 1

    def pop(self) -> TapeEntry:
        entry = self.entries.pop()
        self.popped[entry.kind] += 1
        return entry

    def done_with(self, entry: TapeEntry) -> None:
        for slot in entry.slots:
            self.pool.release(slot)


@dataclass
class GradientAccumulator:
    """Design-gradient contributions gathered during one reverse sweep.

    Terms are kept individually and summed with correct rounding, so the
    total is the same however the sweep was split among workers.
    """

    size: int
    bar_J_seed: float = 1.0
    terms: list = field(default_factory=list)

    def add(self, increment) -> None:
        if increment is not None:
            self.terms.append(np.asarray(increment, dtype=float).reshape(self.size))

    def total(self) -> np.ndarray:
        if not self.terms:
            return np.zeros(self.size)
        return np.asarray(reduce_deterministic([self.terms]), dtype=float).reshape(self.size)


def _check(entry: TapeEntry):
    for slot in entry.slots:
        if slot.reclaimed:
            raise TapeError(f"{entry.kind.value} entry references reclaimed slot {slot.slot_id}")


def reverse_sweep(tape: ActionTape, app, design, grad: GradientAccumulator, comm=None) -> None:
    """Pop every entry of ``tape`` and apply its transposed action.

    Adjoint seeds must already sit in the slots of the iteration's outputs;
    afterwards the slots of its inputs hold the propagated adjoints.
    """
    bar_J = grad.bar_J_seed
    while tape.entries:
        entry = tape.pop()
        _check(entry)
        kind = entry.kind
        if kind is Action.STEP:
            src, dst = entry.slots
            bar = dst.value
            if bar is not None:
                inc_u, inc_rho = app.step_adjoint(
                    entry.snapshot, entry.level, entry.index, entry.dt, design, bar
                )
                src.add(inc_u)
                grad.add(inc_rho)
                dst.clear()
        elif kind is Action.ACCESS:
            (slot,) = entry.slots
            if bar_J != 0.0:
                inc_u, inc_rho = app.access_adjoint(entry.snapshot, entry.index, design, bar_J)
                slot.add(inc_u)
                grad.add(inc_rho)
        elif kind is Action.CLONE:
            src, dst = entry.slots
            src.terms.extend(dst.terms)
            dst.clear()
        elif kind is Action.SUM:
            u_slot, v_slot = entry.slots
            alpha, beta = entry.params
            terms = v_slot.terms
            if terms:
                if alpha == 1.0:
                    u_slot.terms.extend(terms)
                elif alpha != 0.0:
                    u_slot.terms.extend(app.sum(alpha, t, 0.0, t) for t in terms)
                if beta == 0.0:
                    v_slot.clear()
                elif beta != 1.0:
                    v_slot.terms = [app.sum(beta, t, 0.0, t) for t in terms]
        elif kind is Action.SEND:
            (slot,) = entry.slots
            payload = comm.recv(entry.neighbor, ("adj",) + entry.tag)
            slot.terms.extend(app.unpack(buf) for buf in payload)
        elif kind is Action.RECV:
            (slot,) = entry.slots
            # ship the increments unsummed so the sender sums the same multiset
            comm.send(entry.neighbor, ("adj",) + entry.tag, tuple(app.pack(t) for t in slot.terms))
            slot.clear()
        else:  # pragma: no cover
            raise TapeError(f"unknown tape action {kind!r}")
        tape.done_with(entry)


def adjoint_residual(bar_next, bar_prev) -> float:
    """Euclidean norm of the change between two adjoint space-time iterates."""
    if len(bar_next) != len(bar_prev):
        raise ValueError("adjoint iterates live on different grids")
    sq = []
    for a, b in zip(bar_next, bar_prev):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape != b.shape:
            raise ValueError(f"adjoint shape mismatch {a.shape} vs {b.shape}")
        d = float(np.linalg.norm(a - b))
        sq.append(d * d)
    total = reduce_deterministic([sq])
    return float(np.sqrt(total))
