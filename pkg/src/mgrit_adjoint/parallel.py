"""In-process message passing between time-slab workers.

One thread per rank, FIFO channels between every ordered pair of ranks, and
collectives that combine per-rank contributions in a fixed order. Nothing a
worker computes depends on message arrival timing.
"""

from __future__ import annotations

import bisect
import math
import queue
import threading
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

_POLL = 0.05


class WorkerAbort(RuntimeError):
    """Raised in a worker when another rank failed and the run is being torn down."""


@dataclass(frozen=True)
class Partition:
    """Contiguous ownership of finest-grid points, ordered by rank.

    ``starts[r]`` is the first finest point owned by rank ``r``. A rank owns
    a point of a coarser level exactly when it owns the finest point beneath it.
    """

    n_points: int
    starts: tuple[int, ...]

    @property
    def n_workers(self) -> int:
        return len(self.starts)

    def range(self, rank: int) -> tuple[int, int]:
        """Inclusive finest-grid range of ``rank``."""
        lo = self.starts[rank]
        hi = self.starts[rank + 1] - 1 if rank + 1 < self.n_workers else self.n_points - 1
        return lo, hi

    def sizes(self) -> list[int]:
        return [hi - lo + 1 for lo, hi in map(self.range, range(self.n_workers))]

    def owner(self, point: int) -> int:
        return bisect.bisect_right(self.starts, point) - 1

    def level_range(self, rank: int, stride: int, n_level_points: int) -> tuple[int, int]:
        """Inclusive range on a level whose point j sits on finest point j*stride.

        Empty ranges come back with ``lo > hi``.
        """
        lo, hi = self.range(rank)
        return -(-lo // stride), min(hi // stride, n_level_points - 1)

    def level_owner(self, point: int, stride: int) -> int:
        return self.owner(point * stride)


def partition(points: int, workers: int) -> Partition:
    if workers < 1:
        raise ValueError("need at least one worker")
    if workers > points:
        raise ValueError(f"{workers} workers exceed the {points} time points")
    base, extra = divmod(points, workers)
    starts, pos = [], 0
    for r in range(workers):
        starts.append(pos)
        pos += base + (1 if r < extra else 0)
    return Partition(points, tuple(starts))


def reduce_deterministic(values: Sequence[Any]):
    """Sum per-rank contributions, visiting ranks in ascending order.

    Each entry is a scalar, an array, or a sequence of those (for ranks that
    hand over individual terms rather than a partial sum). The result is
    correctly rounded, so it does not depend on how terms were split among
    ranks. Arrays are summed componentwise.
    """
    terms = []
    for v in values:
        if isinstance(v, (list, tuple)):
            terms.extend(v)
        else:
            terms.append(v)
    if not terms:
        return 0.0
    if all(np.ndim(t) == 0 for t in terms):
        return math.fsum(float(t) for t in terms)
    stacked = np.stack([np.asarray(t, dtype=float) for t in terms])
    flat = stacked.reshape(len(terms), -1)
    out = np.array([math.fsum(flat[:, k]) for k in range(flat.shape[1])])
    return out.reshape(stacked.shape[1:])


class Fabric:
    """Shared channels and barrier for one group of ranks."""

    def __init__(self, size: int):
        self.size = size
        self.channels = {
            (s, d): queue.SimpleQueue() for s in range(size) for d in range(size) if s != d
        }
        self.abort = threading.Event()
        self.barrier = threading.Barrier(size)
        self.slots: list[Any] = [None] * size


class Comm:
    """Rank-local view of a :class:`Fabric`, loosely modelled on an MPI communicator."""

    def __init__(self, fabric: Fabric, rank: int):
        self.fabric = fabric
        self.rank = rank
        self.size = fabric.size
        self.sent = 0
        self.received = 0

    def send(self, dest: int, tag, payload: bytes) -> None:
        self.fabric.channels[(self.rank, dest)].put((tag, payload))
        self.sent += 1

    def recv(self, src: int, tag):
        chan = self.fabric.channels[(src, self.rank)]
        while True:
            try:
                got_tag, payload = chan.get(timeout=_POLL)
                break
            except queue.Empty:
                if self.fabric.abort.is_set():
                    raise WorkerAbort(f"rank {self.rank} aborted waiting on rank {src}")
        if got_tag != tag:
            raise RuntimeError(
                f"rank {self.rank}: expected message {tag!r} from rank {src}, got {got_tag!r}"
            )
        self.received += 1
        return payload

    def allgather(self, value) -> list:
        if self.size == 1:
            return [value]
        fab = self.fabric
        fab.slots[self.rank] = value
        self._wait()
        out = list(fab.slots)
        self._wait()
        return out

    def allreduce(self, value):
        return reduce_deterministic(self.allgather(value))

    def barrier(self) -> None:
        if self.size > 1:
            self._wait()

    def _wait(self):
        try:
            self.fabric.barrier.wait()
        except threading.BrokenBarrierError:
            raise WorkerAbort(f"rank {self.rank} aborted at a barrier") from None


def exchange_boundary(comm: Comm, direction: str, payload: bytes | None, tag="boundary"):
    """Pass a boundary buffer to the neighbouring rank.

    ``forward`` moves data from rank r to r+1 (primal states), ``reverse`` from
    r+1 to r (adjoints). Every rank calls this; the return value is what it
    received, or None at the end of the chain.
    """
    if direction == "forward":
        src, dest = comm.rank - 1, comm.rank + 1
    elif direction == "reverse":
        src, dest = comm.rank + 1, comm.rank - 1
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if 0 <= dest < comm.size:
        comm.send(dest, tag, payload)
    if 0 <= src < comm.size:
        return comm.recv(src, tag)
    return None


def run_workers(n_workers: int, target: Callable[[Comm], Any]) -> list:
    """Run ``target(comm)`` on every rank and return the per-rank results.

    A single rank runs inline. With more, each rank gets a thread; the first
    genuine failure aborts the rest and is re-raised here.
    """
    fabric = Fabric(n_workers)
    if n_workers == 1:
        return [target(Comm(fabric, 0))]

    results: list[Any] = [None] * n_workers
    errors: list[BaseException | None] = [None] * n_workers

    def body(rank):
        try:
            results[rank] = target(Comm(fabric, rank))
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors[rank] = exc
            fabric.abort.set()
            fabric.barrier.abort()

    threads = [
        threading.Thread(target=body, args=(r,), name=f"mgrit-rank-{r}", daemon=True)
        for r in range(n_workers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    primary = [e for e in errors if e is not None and not isinstance(e, WorkerAbort)]
    if primary:
        raise primary[0]
    aborted = [e for e in errors if e is not None]
    if aborted:
        raise aborted[0]
    return results
