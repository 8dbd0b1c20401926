"""Barrier functions h(x) with analytic derivatives, and Lie derivatives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import ControlAffineSystem
from .errors import ConfigurationError, ContractViolation


@dataclass(frozen=True)
class Barrier:
    """Scalar barrier h with gradient and optional Hessian.

    The target set is {x : h(x) >= 0}. ``quadratic`` holds (c, P, center)
    when the barrier came from :func:`quadratic_barrier`; the certificate
    module uses it for exact boundary sampling and the closed form.
    """

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = ""
    quadratic: Optional[tuple] = None

    def __call__(self, x) -> float:
        return float(self.value(np.asarray(x, dtype=float)))

    def grad(self, x) -> np.ndarray:
        return np.asarray(self.gradient(np.asarray(x, dtype=float)), dtype=float)


@dataclass(frozen=True)
class LieData:
    lf_h: float
    lg_h: np.ndarray


def quadratic_barrier(c: float, P, center=None, label: str = "quadratic") -> Barrier:
    """h(x) = c - (x - center)^T P (x - center).

    P must be symmetric positive semidefinite and nonzero. Semidefinite P
    covers position-only barriers such as eps^2 - |p|^2 on a double
    integrator; the closed-form certificate additionally requires P > 0.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    if P.shape != (n, n):
        raise ConfigurationError(f"P must be square, got {P.shape}")
    if not np.allclose(P, P.T, atol=1e-12, rtol=0):
        raise ConfigurationError("P must be symmetric")
    eig = np.linalg.eigvalsh(P)
    if eig[0] < -1e-12 or eig[-1] <= 0:
        raise ConfigurationError(f"P must be positive semidefinite and nonzero, eigenvalues {eig}")
    if not c > 0:
        raise ConfigurationError(f"c must be positive, got {c}")
    xc = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    if xc.shape != (n,):
        raise ConfigurationError(f"center must have length {n}")
    c = float(c)
    P.setflags(write=False)
    xc.setflags(write=False)
    hess = -2.0 * P
    hess.setflags(write=False)

    def value(x):
        d = x - xc
        return c - d @ P @ d

    return Barrier(
        value=value,
        gradient=lambda x: -2.0 * (P @ (x - xc)),
        hessian=lambda x: hess,
        label=label,
        quadratic=(c, P, xc),
    )


def obstacle_barrier(center, radius: float, state_dim: int = 2, label: str = "obstacle") -> Barrier:
    """h_obs(x) = |p - center|^2 - radius^2 with p = x[:2]."""
    if not radius > 0:
        raise ConfigurationError(f"obstacle radius must be positive, got {radius}")
    if state_dim < 2:
        raise ConfigurationError("obstacle barrier needs at least two position states")
    pc = np.asarray(center, dtype=float)
    if pc.shape != (2,):
        raise ConfigurationError("obstacle center must be a point in R^2")
    rho2 = float(radius) ** 2
    hess = np.zeros((state_dim, state_dim))
    hess[0, 0] = hess[1, 1] = 2.0
    hess.setflags(write=False)

    def value(x):
        d = x[:2] - pc
        return d @ d - rho2

    def gradient(x):
        out = np.zeros(len(x))
        out[:2] = 2.0 * (x[:2] - pc)
        return out

    return Barrier(value=value, gradient=gradient, hessian=lambda x: hess, label=label)


def lie_derivatives(b: Barrier, sys: ControlAffineSystem, x) -> LieData:
    x = sys.check_state(x)
    dh = b.grad(x)
    if dh.shape != x.shape:
        raise ContractViolation(f"barrier gradient has shape {dh.shape}, state {x.shape}")
    return LieData(lf_h=float(dh @ sys.f(x)), lg_h=dh @ sys.g(x))


def second_order_terms(b: Barrier, sys: ControlAffineSystem, x):
    """Return (L_f^2 h, L_g L_f h) for a barrier of relative degree two.

    L_g L_f h is the row vector multiplying u in the second time
    derivative of h. Assumes L_g h vanishes identically.
    """
    if b.hessian is None:
        raise ContractViolation(f"barrier {b.label!r} has no Hessian")
    if sys.drift_jacobian is None:
        raise ContractViolation(f"system {sys.label!r} has no drift Jacobian")
    x = sys.check_state(x)
    f = sys.f(x)
    g = sys.g(x)
    H = np.asarray(b.hessian(x), dtype=float)
    dh_df = b.grad(x) @ sys.drift_jacobian(x)
    lf2 = float(f @ H @ f + dh_df @ f)
    lglf = f @ H @ g + dh_df @ g
    return lf2, lglf
