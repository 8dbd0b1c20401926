"""Control-affine systems xdot = f(x) + g(x) u and the builtin plants."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, ContractViolation

ArrayFn = Callable[[np.ndarray], np.ndarray]

# per-agent matrices of the stacked multi-agent benchmark
AGENT_A = np.array([[-0.1, 1.0], [0.0, 0.1]])
AGENT_B = np.array([[1.0], [0.5]])


@dataclass(frozen=True)
class ControlAffineSystem:
    """Dynamics xdot = f(x) + g(x) u.

    ``input_map_jacobian`` returns an (n, m, n) array whose ``[i, j, k]``
    entry is d g_ij / d x_k. Only the planner needs it.
    """

    state_dim: int
    input_dim: int
    drift: ArrayFn
    input_map: ArrayFn
    drift_jacobian: Optional[ArrayFn] = None
    input_map_jacobian: Optional[ArrayFn] = None
    label: str = ""

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ConfigurationError("state_dim and input_dim must be positive")

    def f(self, x) -> np.ndarray:
        return np.asarray(self.drift(np.asarray(x, dtype=float)), dtype=float)

    def g(self, x) -> np.ndarray:
        return np.asarray(self.input_map(np.asarray(x, dtype=float)), dtype=float)

    def check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ContractViolation(
                f"{self.label or 'system'}: state has shape {x.shape}, expected ({self.state_dim},)"
            )
        return x

    def check_input(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.input_dim,):
            raise ContractViolation(
                f"{self.label or 'system'}: input has shape {u.shape}, expected ({self.input_dim},)"
            )
        return u

    def __call__(self, x, u) -> np.ndarray:
        return eval_vector_field(self, x, u)


def eval_vector_field(sys: ControlAffineSystem, x, u) -> np.ndarray:
    """Return f(x) + g(x) u after checking dimensions."""
    x = sys.check_state(x)
    u = sys.check_input(u)
    return sys.f(x) + sys.g(x) @ u


def state_jacobian(sys: ControlAffineSystem, x, u) -> np.ndarray:
    """d/dx of f(x) + g(x) u, using the analytic Jacobians."""
    if sys.drift_jacobian is None or sys.input_map_jacobian is None:
        raise ContractViolation(f"{sys.label}: analytic Jacobians are required")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return sys.drift_jacobian(x) + np.einsum("ijk,j->ik", sys.input_map_jacobian(x), u)


def linear_system(A, B, label: str = "linear") -> ControlAffineSystem:
    """xdot = A x + B u with exact (constant) Jacobians."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ConfigurationError(f"A must be square, got {A.shape}")
    if B.ndim != 2 or B.shape[0] != n:
        raise ConfigurationError(f"B must have {n} rows, got {B.shape}")
    m = B.shape[1]
    A.setflags(write=False)
    B.setflags(write=False)
    zero_dg = np.zeros((n, m, n))
    zero_dg.setflags(write=False)
    return ControlAffineSystem(
        state_dim=n,
        input_dim=m,
        drift=lambda x: A @ x,
        input_map=lambda x: B,
        drift_jacobian=lambda x: A,
        input_map_jacobian=lambda x: zero_dg,
        label=label,
    )


def block_diagonal(blocks) -> np.ndarray:
    blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out


def pendulum() -> ControlAffineSystem:
    # x1 = angle (pi is upright), x2 = angular rate; angles are not wrapped
    def f(x):
        return np.array([x[1], -np.sin(x[0])])

    def df(x):
        return np.array([[0.0, 1.0], [-np.cos(x[0]), 0.0]])

    g_const = np.array([[0.0], [1.0]])
    return ControlAffineSystem(
        state_dim=2,
        input_dim=1,
        drift=f,
        input_map=lambda x: g_const,
        drift_jacobian=df,
        input_map_jacobian=lambda x: np.zeros((2, 1, 2)),
        label="pendulum",
    )


def double_integrator() -> ControlAffineSystem:
    """Planar double integrator, state (px, py, vx, vy), input (ax, ay)."""
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1.0
    B = np.zeros((4, 2))
    B[2, 0] = B[3, 1] = 1.0
    return linear_system(A, B, label="double_integrator")


def unicycle() -> ControlAffineSystem:
    """State (px, py, theta), input (v, omega)."""

    def g(x):
        c, s = np.cos(x[2]), np.sin(x[2])
        return np.array([[c, 0.0], [s, 0.0], [0.0, 1.0]])

    def dg(x):
        out = np.zeros((3, 2, 3))
        out[0, 0, 2] = -np.sin(x[2])
        out[1, 0, 2] = np.cos(x[2])
        return out

    return ControlAffineSystem(
        state_dim=3,
        input_dim=2,
        drift=lambda x: np.zeros(3),
        input_map=g,
        drift_jacobian=lambda x: np.zeros((3, 3)),
        input_map_jacobian=dg,
        label="unicycle",
    )


def multiagent(N: int = 8, A=AGENT_A, B=AGENT_B) -> ControlAffineSystem:
    """N decoupled copies of a linear agent, stacked block-diagonally."""
    if int(N) != N or N < 1:
        raise ConfigurationError(f"multiagent: N must be a positive integer, got {N}")
    N = int(N)
    return linear_system(
        block_diagonal([A] * N), block_diagonal([B] * N), label=f"multiagent(N={N})"
    )


_BUILTINS = {
    "pendulum": pendulum,
    "double_integrator": double_integrator,
    "unicycle": unicycle,
    "multiagent": multiagent,
}


def builtin(name: str, **params) -> ControlAffineSystem:
    """Construct one of the named plants. Only ``multiagent`` takes params (N)."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown builtin system {name!r}; choose from {sorted(_BUILTINS)}"
        ) from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"builtin {name!r}: {exc}") from None
