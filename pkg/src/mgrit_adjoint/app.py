"""The user-side interface: everything the solver knows about an application.

The solver never touches a state directly. It only calls these hooks, which
is what lets the adjoint be built by recording and reversing them.
"""

from __future__ import annotations

import numpy as np


class BraidApp:
    """Base class for applications driven by the MGRIT solver.

    States are treated as values: hooks must return new objects and never
    modify their arguments. The defaults below assume numpy arrays; override
    them for other state types.

    Subclasses must provide ``init``, ``step`` and, for objectives and
    gradients, ``access``, ``step_adjoint`` and ``access_adjoint``.
    """

    def init(self, t: float):
        raise NotImplementedError

    def step(self, u_prev, level: int, index: int, dt: float, design: np.ndarray):
        """Advance ``u_prev`` by one step of size ``dt`` to point ``index`` of ``level``."""
        raise NotImplementedError

    def access(self, u, index: int, design: np.ndarray) -> float:
        """Objective contribution of finest-grid point ``index``; zero by default."""
        return 0.0

    def step_adjoint(self, u_prev, level: int, index: int, dt: float, design, bar_u_next):
        """Return ``(d step/d u_prev)^T bar`` and ``(d step/d design)^T bar``."""
        raise NotImplementedError

    def access_adjoint(self, u, index: int, design, bar_J: float):
        """Return the gradients of ``bar_J * access`` with respect to ``u`` and the design."""
        return self.zero(u), np.zeros_like(design, dtype=float)

    def clone(self, u):
        return np.array(u, copy=True)

    def sum(self, alpha: float, u, beta: float, v):
        """Return ``alpha * u + beta * v``."""
        return alpha * u + beta * v

    def norm(self, u) -> float:
        return float(np.linalg.norm(u))

    def zero(self, u):
        return np.zeros_like(u)

    def pack(self, u) -> bytes:
        arr = np.ascontiguousarray(u, dtype=np.float64)
        return arr.tobytes()

    def unpack(self, buf: bytes):
        return np.frombuffer(buf, dtype=np.float64).copy()
