"""Van der Pol oscillator feeding the inflow of a 1-D advection-diffusion field.

State layout: ``u = (z, w, v_1, ..., v_n)`` with ``v_j`` the field at
``x_j = j * dx``. The oscillator ``(z, w)`` evolves on its own; the field is
linear and driven through the Robin inflow condition ``v - mu v_x = z``.

Time stepping is Crank-Nicolson, with the implicit equations solved by
functional iteration. The adjoint step differentiates the converged
Crank-Nicolson equations directly instead of the iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ..app import BraidApp


class StepDivergence(RuntimeError):
    """The functional iteration of a Crank-Nicolson step failed to converge."""

    def __init__(self, iterations: int, dt: float):
        super().__init__(f"functional iteration did not converge in {iterations} sweeps (dt={dt:g})")
        self.iterations = iterations
        self.dt = dt


@dataclass(frozen=True)
class ModelConfig:
    a: float = 1.0
    mu: float = 1e-5
    n: int = 100
    T: float = 30.0
    N: int = 60000
    eps_step: float = 1e-12
    max_step_iter: int = 100
    sweep: str = "gauss-seidel"
    norm: str = "l2"
    upwind_order: int = 2

    def __post_init__(self):
        if self.a <= 0 or self.mu <= 0:
            raise ValueError("advection speed and diffusion must be positive")
        if self.n < 3:
            raise ValueError("need at least 3 field points")
        if self.N < 1 or self.T <= 0:
            raise ValueError("need N >= 1 and T > 0")
        if self.sweep not in ("gauss-seidel", "jacobi"):
            raise ValueError(f"unknown sweep {self.sweep!r}")
        if self.norm not in ("l2", "dx"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.upwind_order not in (1, 2):
            raise ValueError("upwind_order must be 1 or 2")

    @property
    def dx(self) -> float:
        return 1.0 / self.n

    @property
    def dt(self) -> float:
        return self.T / self.N


# -- kernels -------------------------------------------------------------------


@numba.njit(cache=True)
def _rhs(u, rho, a, mu, dx, order, out):
    n = u.size - 2
    z = u[0]
    w = u[1]
    out[0] = w
    out[1] = -z + rho * (1.0 - z * z) * w
    r = mu / dx
    v0 = (z + r * u[2]) / (1.0 + r)
    inv_dx = 1.0 / dx
    inv_dx2 = inv_dx * inv_dx
    for j in range(1, n + 1):
        vj = u[1 + j]
        vm1 = v0 if j == 1 else u[j]
        if j == n:
            vp1 = 2.0 * u[1 + n] - u[n]
        else:
            vp1 = u[2 + j]
        if j == 1 or order == 1:
            d1 = (vj - vm1) * inv_dx
        else:
            vm2 = v0 if j == 2 else u[j - 1]
            d1 = (3.0 * vj - 4.0 * vm1 + vm2) * 0.5 * inv_dx
        d2 = (vp1 - 2.0 * vj + vm1) * inv_dx2
        out[1 + j] = -a * d1 + mu * d2


@numba.njit(cache=True)
def _step_jacobi(u, dt, rho, a, mu, dx, order, tol, max_iter):
    h = 0.5 * dt
    g = np.empty_like(u)
    _rhs(u, rho, a, mu, dx, order, g)
    base = u + h * g
    x = u.copy()
    for s in range(max_iter):
        _rhs(x, rho, a, mu, dx, order, g)
        nrm = 0.0
        for k in range(u.size):
            new = base[k] + h * g[k]
            nrm += (new - x[k]) ** 2
            x[k] = new
        if np.sqrt(nrm) < tol:
            return x, s + 1
    return x, -1


@numba.njit(cache=True)
def _step_gauss_seidel(u, dt, rho, a, mu, dx, order, tol, max_iter):
    # each sweep solves every scalar equation for its own unknown, inflow to outflow
    n = u.size - 2
    h = 0.5 * dt
    g = np.empty_like(u)
    _rhs(u, rho, a, mu, dx, order, g)
    base = u + h * g
    x = u.copy()
    r = mu / dx
    al = 1.0 / (1.0 + r)
    be = r / (1.0 + r)
    inv_dx = 1.0 / dx
    inv_dx2 = inv_dx * inv_dx
    for s in range(max_iter):
        nrm = 0.0
        z = base[0] + h * x[1]
        nrm += (z - x[0]) ** 2
        x[0] = z
        wn = (base[1] - h * z) / (1.0 - h * rho * (1.0 - z * z))
        nrm += (wn - x[1]) ** 2
        x[1] = wn
        for j in range(1, n + 1):
            if j == 1:
                s1 = (1.0 - be) * inv_dx
                r1 = -al * z * inv_dx
                s2 = (be - 2.0) * inv_dx2
                r2 = (x[3] + al * z) * inv_dx2
            else:
                if order == 1:
                    s1 = inv_dx
                    r1 = -x[j] * inv_dx
                else:
                    vm2 = al * z + be * x[2] if j == 2 else x[j - 1]
                    s1 = 1.5 * inv_dx
                    r1 = (vm2 - 4.0 * x[j]) * 0.5 * inv_dx
                if j == n:
                    s2 = 0.0
                    r2 = 0.0
                else:
                    s2 = -2.0 * inv_dx2
                    r2 = (x[2 + j] + x[j]) * inv_dx2
            new = (base[1 + j] + h * (-a * r1 + mu * r2)) / (1.0 - h * (-a * s1 + mu * s2))
            nrm += (new - x[1 + j]) ** 2
            x[1 + j] = new
        if np.sqrt(nrm) < tol:
            return x, s + 1
    return x, -1


# -- public numerics -------------------------------------------------------------


def semi_discrete_rhs(u, rho: float, cfg: ModelConfig = ModelConfig()) -> np.ndarray:
    u = np.ascontiguousarray(u, dtype=np.float64)
    out = np.empty_like(u)
    _rhs(u, float(rho), cfg.a, cfg.mu, cfg.dx, cfg.upwind_order, out)
    return out


def field_operator(cfg: ModelConfig = ModelConfig()) -> tuple[np.ndarray, np.ndarray]:
    """``(L, b)`` with ``dv/dt = L v + b z`` for the semi-discrete field."""
    n = cfg.n
    L = np.empty((n, n))
    e = np.zeros(n + 2)
    out = np.empty(n + 2)
    for k in range(n):
        e[:] = 0.0
        e[2 + k] = 1.0
        _rhs(e, 0.0, cfg.a, cfg.mu, cfg.dx, cfg.upwind_order, out)
        L[:, k] = out[2:]
    e[:] = 0.0
    e[0] = 1.0
    _rhs(e, 0.0, cfg.a, cfg.mu, cfg.dx, cfg.upwind_order, out)
    return L, out[2:].copy()


def rhs_jacobian(u, rho: float, cfg: ModelConfig = ModelConfig(), field=None) -> np.ndarray:
    """Dense Jacobian of the semi-discrete right-hand side."""
    L, b = field if field is not None else field_operator(cfg)
    z, w = u[0], u[1]
    n = cfg.n
    J = np.zeros((n + 2, n + 2))
    J[0, 1] = 1.0
    J[1, 0] = -1.0 - 2.0 * rho * z * w
    J[1, 1] = rho * (1.0 - z * z)
    J[2:, 0] = b
    J[2:, 2:] = L
    return J


def cn_step(u_prev, dt: float, rho: float, cfg: ModelConfig = ModelConfig()):
    """One Crank-Nicolson step; returns ``(u_next, sweeps)`` with sweeps = -1 on failure."""
    if not (isinstance(u_prev, np.ndarray) and u_prev.dtype == np.float64):
        u_prev = np.asarray(u_prev, dtype=np.float64)
    kernel = _step_gauss_seidel if cfg.sweep == "gauss-seidel" else _step_jacobi
    return kernel(
        u_prev,
        float(dt),
        float(rho),
        cfg.a,
        cfg.mu,
        cfg.dx,
        cfg.upwind_order,
        cfg.eps_step,
        cfg.max_step_iter,
    )


class VanDerPolAdvectionDiffusion(BraidApp):
    """The oscillator/advection-diffusion model wired up as solver hooks.

    The design vector holds the single damping parameter ``rho``. The
    objective is ``(1/T) * sum_i dt * |u_i|^2`` over the finest points
    ``i = 1..N``; with ``norm="dx"`` the field part is weighted by ``dx``.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.field = field_operator(cfg)
        self._weights = np.ones(cfg.n + 2)
        if cfg.norm == "dx":
            self._weights[2:] = cfg.dx
        self._adjoint_cache: dict[float, np.ndarray] = {}

    # primal hooks

    def init(self, t: float):
        return np.ones(self.cfg.n + 2)

    def step(self, u_prev, level, index, dt, design):
        u_next, sweeps = cn_step(u_prev, dt, design[0], self.cfg)
        if sweeps < 0:
            raise StepDivergence(self.cfg.max_step_iter, dt)
        return u_next

    def access(self, u, index, design):
        cfg = self.cfg
        return (cfg.dt / cfg.T) * float(np.dot(self._weights * u, u))

    # adjoint hooks

    def _field_solver(self, dt: float) -> np.ndarray:
        inv_t = self._adjoint_cache.get(dt)
        if inv_t is None:
            L, _ = self.field
            A = np.eye(self.cfg.n) - 0.5 * dt * L
            inv_t = np.ascontiguousarray(np.linalg.inv(A).T)
            if len(self._adjoint_cache) > 64:
                self._adjoint_cache.clear()
            self._adjoint_cache[dt] = inv_t
        return inv_t

    def step_adjoint(self, u_prev, level, index, dt, design, bar_u_next):
        rho = float(design[0])
        u_next = self.step(u_prev, level, index, dt, design)
        return cn_adjoint(u_prev, u_next, dt, rho, bar_u_next, self.field, self._field_solver(dt))

    def access_adjoint(self, u, index, design, bar_J):
        cfg = self.cfg
        grad_u = (bar_J * 2.0 * cfg.dt / cfg.T) * (self._weights * u)
        return grad_u, np.zeros(1)


def cn_adjoint(u_prev, u_next, dt, rho, bar, field, field_inv_t):
    """Transposed sensitivities of a converged Crank-Nicolson step.

    With ``R = u_next - u_prev - dt/2 (g(u_prev) + g(u_next))`` this solves
    ``(dR/du_next)^T lam = bar`` and returns ``(-(dR/du_prev)^T lam,
    -(dR/drho)^T lam)``. The system is block lower triangular (oscillator,
    then field), so its transpose is solved field first.
    """
    L, b = field
    bar_prev, d_rho = _cn_adjoint(
        np.ascontiguousarray(u_prev, dtype=np.float64),
        np.ascontiguousarray(u_next, dtype=np.float64),
        float(dt),
        float(rho),
        np.ascontiguousarray(bar, dtype=np.float64),
        L,
        b,
        field_inv_t,
    )
    return bar_prev, np.array([d_rho])


@numba.njit(cache=True)
def _cn_adjoint(u_prev, u_next, dt, rho, bar, L, b, inv_t):
    n = bar.size - 2
    h = 0.5 * dt
    lam = np.empty_like(bar)
    lam[2:] = np.dot(inv_t, bar[2:])
    bl = 0.0
    for i in range(n):
        bl += b[i] * lam[2 + i]
    rz = bar[0] + h * bl
    rw = bar[1]
    z, w = u_next[0], u_next[1]
    # (I - h O^T) with O the oscillator Jacobian at u_next
    a11, a12 = 1.0, h * (1.0 + 2.0 * rho * z * w)
    a21, a22 = -h, 1.0 - h * rho * (1.0 - z * z)
    det = a11 * a22 - a12 * a21
    lam[0] = (rz * a22 - a12 * rw) / det
    lam[1] = (a11 * rw - a21 * rz) / det

    zp, wp = u_prev[0], u_prev[1]
    out = lam.copy()
    out[0] += h * (-(1.0 + 2.0 * rho * zp * wp) * lam[1] + bl)
    out[1] += h * (lam[0] + rho * (1.0 - zp * zp) * lam[1])
    # L^T lam, walking the rows of L (only a band is nonzero)
    lt = np.zeros(n)
    for i in range(n):
        li = lam[2 + i]
        for k in range(max(0, i - 2), min(n, i + 2)):
            lt[k] += L[i, k] * li
    for k in range(n):
        out[2 + k] += h * lt[k]
    d_rho = h * lam[1] * ((1.0 - zp * zp) * wp + (1.0 - z * z) * w)
    return out, d_rho
