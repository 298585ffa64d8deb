"""A linear one-step test problem with an affine design dependence.

``u_next = A_l u + B_l rho`` on level ``l``. Either the coarse operators are
exact powers of the fine one (so a coarse step reproduces ``s`` fine steps),
or they are a cheap "rediscretisation" ``I + s (A - I)``. The objective is
``weight * sum_i |u_i|^2``. Everything is small and dense, which makes this
the problem of choice for brute-force checks.
"""

from __future__ import annotations

import numpy as np

from ..app import BraidApp


class LinearApp(BraidApp):
    def __init__(self, A, B=None, u0=None, weight=1.0, m=4, coarse="exact", max_levels=8):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        dim = A.shape[0]
        B = np.zeros((dim, 1)) if B is None else np.asarray(B, dtype=float).reshape(dim, -1)
        if coarse not in ("exact", "rediscretize"):
            raise ValueError(f"unknown coarse operator {coarse!r}")
        self.dim = dim
        self.u0 = np.ones(dim) if u0 is None else np.asarray(u0, dtype=float).reshape(dim)
        self.weight = float(weight)
        self.ops = []
        Al, Bl = A, B
        for level in range(max_levels):
            if coarse == "rediscretize":
                s = m**level
                Al, Bl = np.eye(dim) + s * (A - np.eye(dim)), s * B
            self.ops.append((Al, Bl))
            if coarse == "exact":
                # m steps of the current level make one step of the next
                acc, P = np.zeros_like(Bl), np.eye(dim)
                for _ in range(m):
                    acc = acc + P @ Bl
                    P = Al @ P
                Al, Bl = P, acc

    def init(self, t):
        return self.u0.copy()

    def step(self, u_prev, level, index, dt, design):
        Al, Bl = self.ops[level]
        return Al @ u_prev + Bl @ np.asarray(design, dtype=float)

    def access(self, u, index, design):
        return self.weight * float(u @ u)

    def step_adjoint(self, u_prev, level, index, dt, design, bar_u_next):
        Al, Bl = self.ops[level]
        return Al.T @ bar_u_next, Bl.T @ bar_u_next

    def access_adjoint(self, u, index, design, bar_J):
        return 2.0 * self.weight * bar_J * u, np.zeros(np.size(design))
