import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgrit_adjoint.parallel import (
    Comm,
    Fabric,
    WorkerAbort,
    exchange_boundary,
    partition,
    reduce_deterministic,
    run_workers,
)


def test_partition_sizes():
    assert partition(17, 4).sizes() == [5, 4, 4, 4]
    p = partition(100, 1)
    assert p.range(0) == (0, 99)


def test_partition_rejects_too_many_workers():
    with pytest.raises(ValueError):
        partition(8, 9)
    with pytest.raises(ValueError):
        partition(8, 0)


@given(points=st.integers(1, 500), workers=st.integers(1, 40))
def test_partition_covers(points, workers):
    if workers > points:
        with pytest.raises(ValueError):
            partition(points, workers)
        return
    p = partition(points, workers)
    sizes = p.sizes()
    assert sum(sizes) == points
    assert max(sizes) - min(sizes) <= 1
    assert min(sizes) >= 1
    covered = []
    for r in range(workers):
        lo, hi = p.range(r)
        covered.extend(range(lo, hi + 1))
        assert p.owner(lo) == r and p.owner(hi) == r
    assert covered == list(range(points))


def test_level_range_may_be_empty():
    p = partition(17, 4)  # ranks own 0-4, 5-8, 9-12, 13-16
    assert p.level_range(1, 4, 5) == (2, 2)
    lo, hi = p.level_range(2, 16, 2)
    assert lo > hi


def test_reduce_order_independent():
    assert reduce_deterministic([1.0, 2.0, 3.0]) == 6.0
    terms = [0.1] * 10 + [1e16, -1e16]
    assert reduce_deterministic(terms) == reduce_deterministic(terms[::-1])
    assert reduce_deterministic([[1.0, 2.0], [], [3.0]]) == 6.0
    v = reduce_deterministic([np.array([1.0, 2.0]), [np.array([0.5, 0.5])]])
    assert np.array_equal(v, [1.5, 2.5])
    assert reduce_deterministic([]) == 0.0


def test_exchange_forward_then_reverse():
    def target(comm):
        got = exchange_boundary(comm, "forward", f"state from {comm.rank}".encode())
        back = exchange_boundary(comm, "reverse", b"adjoint" if got else None, tag="adj")
        return got, back

    (got0, back0), (got1, back1) = run_workers(2, target)
    assert got0 is None and got1 == b"state from 0"
    assert back0 == b"adjoint" and back1 is None


def test_pack_roundtrip_bitwise(rng):
    from mgrit_adjoint.app import BraidApp

    app = BraidApp()
    u = rng.standard_normal(102)
    u[3] = -0.0
    assert app.unpack(app.pack(u)).tobytes() == u.tobytes()


def test_tag_mismatch_is_an_error():
    fab = Fabric(2)
    a, b = Comm(fab, 0), Comm(fab, 1)
    a.send(1, ("F", 0, 4), b"")
    with pytest.raises(RuntimeError):
        b.recv(0, ("C", 0, 4))


def test_failure_aborts_other_ranks():
    def target(comm):
        if comm.rank == 1:
            raise ZeroDivisionError("boom")
        comm.recv(1, "never sent")

    with pytest.raises(ZeroDivisionError):
        run_workers(3, target)


def test_allreduce_matches_serial():
    def target(comm):
        return comm.allreduce([0.1 * comm.rank, 1e-17])

    out = run_workers(4, target)
    assert len(set(out)) == 1
    assert out[0] == reduce_deterministic([[0.1 * r, 1e-17] for r in range(4)])


def test_workers_run_in_threads():
    names = run_workers(3, lambda comm: threading.current_thread().name)
    assert len(set(names)) == 3
    assert WorkerAbort.__mro__[1] is RuntimeError
