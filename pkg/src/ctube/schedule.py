"""Constriction schedules r(t) and the constricting tube h(x) + r(t)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .barrier import Barrier
from .errors import ConfigurationError

FAMILIES = ("linear", "exponential", "polynomial", "offset_quadratic")


@dataclass(frozen=True)
class ConstrictionSchedule:
    """Relaxation r(t) shrinking from r0 at t = 0 to its terminal value at T.

    ``param`` is lambda (exponential), p (polynomial) or delta
    (offset_quadratic); unused for linear. For t >= T the schedule holds
    r(T) with zero derivatives.
    """

    kind: str
    r0: float
    T: float
    param: float = 0.0

    @property
    def terminal_value(self) -> float:
        return -self.param if self.kind == "offset_quadratic" else 0.0

    def eval(self, t: float) -> tuple[float, float, float]:
        """Return (r, rdot, rddot) at time t."""
        if t >= self.T:
            return self.terminal_value, 0.0, 0.0
        s = 1.0 - t / self.T  # remaining fraction, in (0, 1] for t in [0, T)
        r0, T, k = self.r0, self.T, self.param
        if self.kind == "linear":
            return r0 * s, -r0 / T, 0.0
        if self.kind == "exponential":
            scale = r0 / math.expm1(k)
            e = math.exp(k * s)
            return scale * (e - 1.0), -scale * e * k / T, scale * e * (k / T) ** 2
        if self.kind == "polynomial":
            rddot = 0.0 if k == 1 else r0 * k * (k - 1) * s ** (k - 2) / T**2
            return r0 * s**k, -r0 * k * s ** (k - 1) / T, rddot
        # offset_quadratic
        a = r0 + k
        return a * s * s - k, -2.0 * a * s / T, 2.0 * a / T**2

    def r(self, t: float) -> float:
        return self.eval(t)[0]

    def rdot(self, t: float) -> float:
        return self.eval(t)[1]


def make_schedule(kind: str, r0: float, T: float, param: float | None = None) -> ConstrictionSchedule:
    """Build a schedule.

    Args:
        kind: one of ``linear``, ``exponential``, ``polynomial``, ``offset_quadratic``.
        r0: initial relaxation, >= 0.
        T: deadline in seconds, > 0.
        param: lambda > 0, p >= 1 or delta >= 0 depending on ``kind``.
    """
    if kind not in FAMILIES:
        raise ConfigurationError(f"unknown schedule family {kind!r}; choose from {FAMILIES}")
    if not (np.isfinite(r0) and r0 >= 0):
        raise ConfigurationError(f"r0 must be >= 0, got {r0}")
    if not (np.isfinite(T) and T > 0):
        raise ConfigurationError(f"T must be > 0, got {T}")
    if kind == "linear":
        param = 0.0
    elif param is None:
        raise ConfigurationError(f"{kind} schedule needs a parameter")
    elif kind == "exponential" and not param > 0:
        raise ConfigurationError(f"exponential rate must be > 0, got {param}")
    elif kind == "polynomial" and not param >= 1:
        raise ConfigurationError(f"polynomial power must be >= 1, got {param}")
    elif kind == "offset_quadratic" and not param >= 0:
        raise ConfigurationError(f"offset must be >= 0, got {param}")
    return ConstrictionSchedule(kind, float(r0), float(T), float(param))


def initial_relaxation(b: Barrier, x0) -> float:
    """r0 = max(0, -h(x0))."""
    return max(0.0, -b(x0))


def tube_value(b: Barrier, s: ConstrictionSchedule, x, t: float) -> float:
    """h(x) + r(t); x lies in the tube at time t iff this is >= 0."""
    return b(x) + s.r(t)


@dataclass(frozen=True)
class Definition1Report:
    containment_ok: bool
    recovery_ok: bool
    monotone_ok: bool
    max_positive_rdot: float

    @property
    def all_ok(self) -> bool:
        return self.containment_ok and self.recovery_ok and self.monotone_ok


def verify_definition1(s, grid_points: int = 1001, tol: float = 1e-9) -> Definition1Report:
    """Grid check of r(0) = r0, r(T) = terminal value and rdot <= 0.

    ``s`` is anything exposing ``eval(t)``, ``r0``, ``T`` and
    ``terminal_value``, so hand-built fixtures can be checked too.
    """
    if grid_points < 2:
        raise ConfigurationError("grid_points must be >= 2")
    ts = np.linspace(0.0, s.T, grid_points)
    vals = np.array([s.eval(t) for t in ts])
    r, rdot = vals[:, 0], vals[:, 1]
    scale = max(1.0, abs(s.r0))
    containment = abs(r[0] - s.r0) <= tol * scale
    # left limit as well, so a formula that jumps onto the clamp is caught
    left = s.eval(s.T * (1.0 - 1e-12))[0]
    recovery = (
        abs(r[-1] - s.terminal_value) <= tol * scale
        and abs(left - s.terminal_value) <= 1e-6 * scale
    )
    max_pos = float(max(0.0, rdot.max()))
    monotone = max_pos <= tol * scale and bool(np.all(np.diff(r) <= tol * scale))
    return Definition1Report(bool(containment), bool(recovery), bool(monotone), max_pos)
