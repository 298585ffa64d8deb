import numpy as np
import pytest

from mgrit_adjoint import SolverConfig, TimeGridSpec, build_hierarchy, initial_guess, solve
from mgrit_adjoint.core import SpaceTimeState
from mgrit_adjoint.models import LinearApp, ModelConfig, VanDerPolAdvectionDiffusion
from mgrit_adjoint.oracles import (
    FDSpec,
    dense_iteration_jacobian,
    finite_difference_gradient,
    sequential_adjoint,
    sequential_forward,
)


def test_fdspec_validation():
    with pytest.raises(ValueError):
        FDSpec(epsilon=0.0)
    with pytest.raises(ValueError):
        FDSpec(scheme="backward")
    with pytest.raises(ValueError):
        FDSpec(direction=-1)


def test_scalar_trajectory(half_app):
    traj, J = sequential_forward(half_app, TimeGridSpec.uniform(1.0, 4), [0.0])
    assert [float(u[0]) for u in traj] == [1.0, 0.5, 0.25, 0.125, 0.0625]
    assert J == 0.25 + 0.0625 + 0.125**2 + 0.0625**2


def test_single_step(half_app):
    traj, J = sequential_forward(half_app, TimeGridSpec.uniform(1.0, 1), [0.0])
    assert len(traj) == 2 and traj[1][0] == 0.5 and J == 0.25


def test_zero_weight_gives_zero_gradient():
    app = LinearApp([[0.9]], B=[[1.0]], weight=0.0)
    grad = sequential_adjoint(app, TimeGridSpec.uniform(1.0, 10), [0.3])
    assert np.all(grad == 0.0)


def test_fd_of_square():
    # u1 = rho, J = rho^2
    app = LinearApp([[0.0]], B=[[1.0]], u0=[0.0])
    grid = TimeGridSpec.uniform(1.0, 1)
    eps = 1e-4
    fwd = finite_difference_gradient(app, grid, [1.5], FDSpec(eps))
    assert fwd == pytest.approx(3.0 + eps, abs=1e-9)
    ctr = finite_difference_gradient(app, grid, [1.5], FDSpec(eps, "central"))
    assert ctr == pytest.approx(3.0, abs=1e-9)
    assert sequential_adjoint(app, grid, [1.5])[0] == pytest.approx(3.0)


def test_fd_direction_out_of_range():
    app = LinearApp([[0.5]])
    with pytest.raises(ValueError):
        finite_difference_gradient(app, TimeGridSpec.uniform(1.0, 2), [1.0], FDSpec(direction=1))


def test_linear_adjoint_closed_form():
    # u_i = a^i u0 + rho (1 - a^i)/(1 - a), J = sum_i u_i^2
    a, u0, rho, N = 0.8, 1.0, 0.7, 12
    app = LinearApp([[a]], B=[[1.0]], u0=[u0])
    grid = TimeGridSpec.uniform(1.0, N)
    i = np.arange(1, N + 1)
    u = a**i * u0 + rho * (1 - a**i) / (1 - a)
    exact = np.sum(2 * u * (1 - a**i) / (1 - a))
    assert sequential_adjoint(app, grid, [rho])[0] == pytest.approx(exact, rel=1e-13)


def test_adjoint_states_are_sensitivities(rotation_app, rng):
    grid = TimeGridSpec.uniform(1.0, 6)
    design = [0.4]
    _, bars = sequential_adjoint(rotation_app, grid, design, return_adjoints=True)
    traj, _ = sequential_forward(rotation_app, grid, design)
    # J as a function of u^3, with the later steps replayed
    def tail(u3):
        u, J = u3, rotation_app.access(u3, 3, design)
        for k in range(4, 7):
            u = rotation_app.step(u, 0, k, grid.dt, design)
            J += rotation_app.access(u, k, design)
        return J

    eps = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = eps
        fd = (tail(traj[3] + e) - tail(traj[3] - e)) / (2 * eps)
        assert bars[3][k] == pytest.approx(fd, rel=1e-8)


def test_central_and_forward_agree_on_model():
    cfg = ModelConfig(T=0.3, N=600)
    app = VanDerPolAdvectionDiffusion(cfg)
    grid = TimeGridSpec.uniform(cfg.T, cfg.N)
    fwd = finite_difference_gradient(app, grid, [2.0], FDSpec(1e-6, "forward"))
    ctr = finite_difference_gradient(app, grid, [2.0], FDSpec(1e-6, "central"))
    adj = sequential_adjoint(app, grid, [2.0])[0]
    assert abs(fwd - ctr) / abs(ctr) < 1e-4
    assert abs(adj - ctr) / abs(ctr) < 1e-5


def _hand_assembled_two_level(a, phi):
    """Linear map of one two-level FCF iteration, N=8, m=4, scalar state u0..u8."""
    n = 9

    def replace(rows):
        M = np.eye(n)
        for j, row in rows.items():
            M[j] = row
        return M

    def e(k, scale=1.0):
        r = np.zeros(n)
        r[k] = scale
        return r

    F = np.eye(n)
    for j in (1, 2, 3, 5, 6, 7):
        F = replace({j: e(j - 1, a)}) @ F
    C = replace({4: e(3, a), 8: e(7, a)})
    # coarse solve: v_c = phi v_{c-1} + a u_{4c-1} - phi u_{4c-4}, with v_0 = u_0
    row4 = e(3, a)
    row8 = phi * row4 + e(7, a) - e(4, phi)
    G = replace({4: row4, 8: row8})
    return F @ G @ F @ C @ F


@pytest.mark.parametrize("coarse", ["exact", "rediscretize"])
def test_dense_jacobian_matches_hand_assembled(coarse):
    a = 0.5
    app = LinearApp([[a]], m=4, coarse=coarse)
    phi = a**4 if coarse == "exact" else 1 + 4 * (a - 1)
    h = build_hierarchy(TimeGridSpec.uniform(1.0, 8), 4, 2)
    state = SpaceTimeState(0, [np.array([1.0])] + [np.array([x]) for x in np.linspace(0.1, 0.8, 8)])
    jac = dense_iteration_jacobian(app, h, state, [0.0], SolverConfig(max_levels=2))
    H = _hand_assembled_two_level(a, phi)
    assert np.allclose(jac, H[1:, 1:], atol=1e-9)


def test_dense_jacobian_rejects_large_problems():
    app = LinearApp(np.eye(300) * 0.5)
    h = build_hierarchy(TimeGridSpec.uniform(1.0, 8), 4, 2)
    with pytest.raises(ValueError):
        dense_iteration_jacobian(app, h, initial_guess(app, h), [0.0])


@pytest.mark.parametrize("workers", [1, 3])
def test_sequential_matches_mgrit(workers):
    cfg = ModelConfig(T=0.3, N=600)
    app = VanDerPolAdvectionDiffusion(cfg)
    grid = TimeGridSpec.uniform(cfg.T, cfg.N)
    tol = 1e-10
    traj, J = sequential_forward(app, grid, [2.0])
    res = solve(app, grid, [2.0], SolverConfig(tol=tol, workers=workers))
    assert res.converged
    diff = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(res.state.values, traj)))
    assert diff < 10 * tol
    assert res.J == pytest.approx(J, rel=1e-10)
