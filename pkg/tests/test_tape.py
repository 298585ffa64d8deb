import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgrit_adjoint import SolverConfig, SpaceTimeState, TapedIteration, TimeGridSpec
from mgrit_adjoint.app import BraidApp
from mgrit_adjoint.tape import (
    Action,
    ActionTape,
    GradientAccumulator,
    SlotPool,
    TapeEntry,
    TapeError,
    Vector,
    adjoint_residual,
    order_free_sum,
    reverse_sweep,
)

APP = BraidApp()


def _pair(pool):
    return pool.new(), pool.new()


def test_sum_rule():
    pool = SlotPool()
    tape = ActionTape(pool)
    u, v = _pair(pool)
    tape.record(TapeEntry(Action.SUM, (u, v), params=(2.0, 3.0)))
    v.set(np.array([1.0, 0.0]))
    u.set(np.zeros(2))
    reverse_sweep(tape, APP, np.zeros(1), GradientAccumulator(1))
    assert np.array_equal(u.value, [2.0, 0.0])
    assert np.array_equal(v.value, [3.0, 0.0])
    assert len(tape) == 0


def test_clone_rule():
    pool = SlotPool()
    tape = ActionTape(pool)
    src, dst = _pair(pool)
    tape.record(TapeEntry(Action.CLONE, (src, dst)))
    dst.set(np.array([5.0]))
    src.set(np.array([1.0]))
    reverse_sweep(tape, APP, np.zeros(1), GradientAccumulator(1))
    assert np.array_equal(src.value, [6.0])
    assert dst.value is None


class Doubler(BraidApp):
    def step(self, u_prev, level, index, dt, design):
        return 2.0 * u_prev + design[0]

    def step_adjoint(self, u_prev, level, index, dt, design, bar):
        return 2.0 * bar, np.array([bar.sum()])


def test_step_rule_releases_output():
    pool = SlotPool()
    tape = ActionTape(pool)
    src, dst = _pair(pool)
    tape.record(TapeEntry(Action.STEP, (src, dst), snapshot=np.ones(2)))
    dst.set(np.array([1.0, 2.0]))
    grad = GradientAccumulator(1)
    reverse_sweep(tape, Doubler(), np.array([0.0]), grad)
    assert np.array_equal(src.value, [2.0, 4.0])
    assert dst.value is None
    assert grad.total()[0] == 3.0


def test_slots_reclaimed_after_vectors_and_entries_die():
    pool = SlotPool()
    tape = ActionTape(pool)
    a = Vector(np.ones(1), pool.new())
    b = Vector(np.ones(1), pool.new())
    tape.record(TapeEntry(Action.CLONE, (a.slot, b.slot)))
    del b  # the clone dies; its slot lives on through the tape entry
    assert pool.reclaimed == 0
    reverse_sweep(tape, APP, np.zeros(1), GradientAccumulator(1))
    assert pool.reclaimed == 1
    del a
    assert pool.reclaimed == 2 and not pool.live


def test_reclaimed_slot_is_a_hard_error():
    pool = SlotPool()
    tape = ActionTape(pool)
    s = pool.new()
    pool.release(s)
    with pytest.raises(TapeError):
        tape.record(TapeEntry(Action.ACCESS, (s,)))


def test_adjoint_residual():
    a = [np.ones(3), np.zeros(3)]
    assert adjoint_residual(a, a) == 0.0
    assert adjoint_residual([np.array([3.0]), np.array([4.0])], [np.zeros(1), np.zeros(1)]) == 5.0
    with pytest.raises(ValueError):
        adjoint_residual([np.ones(2)], [np.ones(3)])


@settings(max_examples=50)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12), st.randoms())
def test_order_free_sum_is_permutation_invariant(values, rnd):
    terms = [np.array([v, -v / 3.0]) for v in values]
    shuffled = terms[:]
    rnd.shuffle(shuffled)
    assert order_free_sum(terms).tobytes() == order_free_sum(shuffled).tobytes()


def _linear_taped(app, rng, n_steps=8, m=2, levels=3):
    grid = TimeGridSpec.uniform(1.0, n_steps)
    cfg = SolverConfig(coarsening=m, max_levels=levels)
    h = cfg.hierarchy(grid)
    state = SpaceTimeState(0, [app.u0] + [rng.standard_normal(app.dim) for _ in range(n_steps)])
    return h, cfg, state


def test_tape_counts_and_cleanup(rotation_app, rng):
    h, cfg, state = _linear_taped(rotation_app, rng)
    it = TapedIteration(rotation_app, h, state, [0.3], cfg)
    recorded = dict(it.tape.recorded)
    assert recorded[Action.ACCESS] == 8
    assert len(it.tape) == sum(recorded.values())
    seed = [None] + [rng.standard_normal(2) for _ in range(8)]
    it.reverse(seed)
    assert len(it.tape) == 0
    assert it.tape.popped == recorded
    pool = it.worker.pool
    assert pool.reclaimed == pool.created and not pool.live
    with pytest.raises(RuntimeError):
        it.reverse(seed)


def test_reverse_is_linear(rotation_app, rng):
    h, cfg, state = _linear_taped(rotation_app, rng)
    a = [None] + [rng.standard_normal(2) for _ in range(8)]
    b = [None] + [rng.standard_normal(2) for _ in range(8)]
    ab = [None] + [x + y for x, y in zip(a[1:], b[1:])]

    def sweep(seed, bar_J):
        return TapedIteration(rotation_app, h, state, [0.3], cfg).reverse(seed, bar_J)

    bar_a, g_a = sweep(a, 0.5)
    bar_b, g_b = sweep(b, 0.5)
    bar_ab, g_ab = sweep(ab, 1.0)
    for x, y, z in zip(bar_a[1:], bar_b[1:], bar_ab[1:]):
        np.testing.assert_allclose(x + y, z, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(g_a + g_b, g_ab, rtol=1e-12)


def test_zero_seed_gives_zero(rotation_app, rng):
    h, cfg, state = _linear_taped(rotation_app, rng)
    zero = [None] + [np.zeros(2)] * 8
    bar, grad = TapedIteration(rotation_app, h, state, [0.3], cfg).reverse(zero, bar_J=0.0)
    assert all(not b.any() for b in bar[1:])
    assert not grad.any()
