"""Pointwise tube controllers and the fixed-step closed-loop simulator."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .barrier import Barrier, lie_derivatives, second_order_terms
from .certificate import InputSet
from .dynamics import ControlAffineSystem
from .errors import ConfigurationError, DomainError, SimulationError
from .qpsolve import QpProblem, solve_min_norm_ball, solve_qp
from .schedule import ConstrictionSchedule

CONTROLLER_KINDS = ("cbf_qp", "hocbf2_qp", "pt_clf_baseline", "nominal")
# statuses that do not count as an infeasible step
OK_STATUSES = ("optimal", "clipped", "end", "hold", "suboptimal")


def pd_nominal(kp: float, kd: float, position_dim: int) -> Callable[[np.ndarray], np.ndarray]:
    """u_nom(x) = -kp p - kd v for a state laid out as (p, v)."""

    def law(x):
        return -kp * x[:position_dim] - kd * x[position_dim:2 * position_dim]

    return law


@dataclass
class ControllerSpec:
    kind: str
    barrier: Barrier
    schedule: ConstrictionSchedule
    input_set: InputSet
    alpha: float = 0.9
    gamma1: float = 0.9
    gamma2: float = 0.9
    nominal: Optional[Callable[[np.ndarray], np.ndarray]] = None
    clf_gain: float = 2.0  # decay gain of the baseline CLF condition
    # Sampled-data offset m: the QP enforces the condition on psi - m. With a
    # held input the concavity of h lets psi settle about |u|^2 dt / alpha
    # below its target; m > 0 absorbs that. Zero gives the continuous law.
    tube_margin: float = 0.0

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ConfigurationError(f"unknown controller kind {self.kind!r}; choose from {CONTROLLER_KINDS}")
        for name in ("alpha", "gamma1", "gamma2", "clf_gain"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"controller {name} must be > 0")
        if not self.tube_margin >= 0:
            raise ConfigurationError("tube_margin must be >= 0")
        if self.kind == "nominal" and self.nominal is None:
            raise ConfigurationError("nominal controller needs a nominal law")
        if self.kind == "pt_clf_baseline" and self.barrier.quadratic is None:
            raise ConfigurationError("pt_clf_baseline needs a quadratic barrier")


def cbf_constraint(spec: ControllerSpec, sys: ControlAffineSystem, x, t: float):
    """(a, b) with a . u >= b encoding L_f h + L_g h u + rdot >= -alpha (h + r)."""
    r, rdot, _ = spec.schedule.eval(t)
    lie = lie_derivatives(spec.barrier, sys, x)
    tube = spec.barrier(x) + r - spec.tube_margin
    return lie.lg_h, -lie.lf_h - rdot - spec.alpha * tube


def hocbf_terms(spec: ControllerSpec, sys: ControlAffineSystem, x, t: float):
    """Return (psi0, psi1, a, b) for the relative-degree-2 cascade.

    psi0 = h + r, psi1 = L_f h + rdot + gamma1 psi0, and the constraint
    d/dt psi1 + gamma2 psi1 >= 0 reads a . u >= b.
    """
    r, rdot, rddot = spec.schedule.eval(t)
    lf_h = lie_derivatives(spec.barrier, sys, x).lf_h
    lf2_h, lglf_h = second_order_terms(spec.barrier, sys, x)
    psi0 = spec.barrier(x) + r
    psi1 = lf_h + rdot + spec.gamma1 * (psi0 - spec.tube_margin)
    b = -(lf2_h + rddot + spec.gamma1 * (lf_h + rdot) + spec.gamma2 * psi1)
    return psi0, psi1, lglf_h, b


class Controller:
    """Callable feedback law (x, t) -> (u, status) built from a spec.

    Each instance owns its QP warm-start state; build one per run.
    """

    def __init__(self, spec: ControllerSpec, sys: ControlAffineSystem, warm_start: bool = True):
        self.spec = spec
        self.sys = sys
        self.warm_start = warm_start
        self._active = None
        U = spec.input_set
        if U.dim != sys.input_dim:
            raise ConfigurationError(f"input set dim {U.dim} != system input dim {sys.input_dim}")
        if U.kind == "ball2" and spec.nominal is not None and spec.kind in ("cbf_qp", "hocbf2_qp"):
            raise ConfigurationError("a nominal law requires a box input set")

    @property
    def barrier(self) -> Barrier:
        return self.spec.barrier

    @property
    def schedule(self) -> ConstrictionSchedule:
        return self.spec.schedule

    def u_nom(self, x) -> np.ndarray:
        if self.spec.nominal is None:
            return np.zeros(self.sys.input_dim)
        return np.asarray(self.spec.nominal(x), dtype=float)

    def __call__(self, x, t: float):
        kind = self.spec.kind
        if kind == "cbf_qp":
            a, b = cbf_constraint(self.spec, self.sys, x, t)
            return self._filter(a, b, x)
        if kind == "hocbf2_qp":
            _, _, a, b = hocbf_terms(self.spec, self.sys, x, t)
            return self._filter(a, b, x)
        if kind == "pt_clf_baseline":
            return self._baseline(x, t)
        U = self.spec.input_set
        u = self.u_nom(x)
        return _clip(U, u), "optimal"

    def _filter(self, a, b, x):
        """min |u - u_nom|^2 s.t. a . u >= b, u in U; fallback on infeasibility."""
        U = self.spec.input_set
        a = np.asarray(a, dtype=float).reshape(-1)
        if U.kind == "ball2":
            sol = solve_min_norm_ball(a, b, float(U.u_max))
        else:
            u_nom = self.u_nom(x)
            bounds = U.bounds
            problem = QpProblem(
                H=2.0 * np.eye(a.size), q=-2.0 * u_nom, G=-a[None, :], g=np.array([-b]),
                lower=-bounds, upper=bounds,
            )
            sol = solve_qp(problem, warm_start=self._active if self.warm_start else None)
            if sol.optimal:
                self._active = sol.active_set
        if sol.optimal:
            return sol.u, "optimal"
        # push as hard as the input set allows along the constraint normal
        return U.maximizer(a), sol.status

    def _baseline(self, x, t):
        """Prescribed-time CLF V = -h / theta^2, theta = 1 - t/T.

        Enforces dV/dt <= -(k / theta) V with the min-norm input, which
        reads L_g h u >= -L_f h - (k + 2/T) h / theta, then clips the
        result to the input set.
        """
        T = self.spec.schedule.T
        if t >= T:
            raise DomainError(f"baseline CLF is undefined at t = {t} >= T = {T}")
        theta = 1.0 - t / T
        lie = lie_derivatives(self.spec.barrier, self.sys, x)
        h = self.spec.barrier(x)
        a = lie.lg_h
        b = -lie.lf_h - (self.spec.clf_gain + 2.0 / T) * h / theta
        U = self.spec.input_set
        if b <= 0:
            return np.zeros_like(a), "optimal"
        na2 = float(a @ a)
        if na2 == 0.0:
            return U.maximizer(a), "infeasible"
        u = (b / na2) * a
        clipped = _clip(U, u)
        return clipped, ("optimal" if np.array_equal(clipped, u) else "clipped")


def _clip(U: InputSet, u) -> np.ndarray:
    if U.kind == "box":
        return np.clip(u, -U.bounds, U.bounds)
    nu = np.linalg.norm(u)
    return u if nu <= U.u_max else u * (float(U.u_max) / nu)


def cbf_qp_control(spec: ControllerSpec, sys: ControlAffineSystem, x, t: float):
    return Controller(spec, sys, warm_start=False)(x, t)


def hocbf_qp_control(spec: ControllerSpec, sys: ControlAffineSystem, x, t: float):
    return Controller(spec, sys, warm_start=False)(x, t)


def pt_clf_baseline_control(spec: ControllerSpec, sys: ControlAffineSystem, x, t: float):
    return Controller(spec, sys, warm_start=False)(x, t)


@dataclass
class Trajectory:
    """Per-step record of a closed-loop run (one row per time knot)."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    tube_values: list = field(default_factory=list)
    barrier_values: list = field(default_factory=list)
    aux_barriers: dict = field(default_factory=dict)
    solver_statuses: list = field(default_factory=list)
    infeasible_steps: list = field(default_factory=list)
    dt: float = 0.0

    def __len__(self):
        return len(self.times)

    def append(self, t, x, u, h, tube, status, aux=None):
        self.times.append(float(t))
        self.states.append(np.array(x, dtype=float))
        self.inputs.append(np.array(u, dtype=float))
        self.barrier_values.append(float(h))
        self.tube_values.append(float(tube))
        self.solver_statuses.append(status)
        for name, val in (aux or {}).items():
            self.aux_barriers.setdefault(name, []).append(float(val))
        if status not in OK_STATUSES:
            self.infeasible_steps.append(len(self.times) - 1)

    @property
    def X(self) -> np.ndarray:
        return np.array(self.states)

    @property
    def U(self) -> np.ndarray:
        return np.array(self.inputs)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.times)

    def value_at(self, t: float) -> int:
        """Index of the knot closest to time t."""
        return int(np.argmin(np.abs(self.t - t)))

    def write_csv(self, path) -> None:
        n = self.states[0].size
        m = self.inputs[0].size
        aux = list(self.aux_barriers)
        header = ["t", *[f"x{i}" for i in range(n)], *[f"u{j}" for j in range(m)], "h", "tube", "status", *aux]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k in range(len(self.times)):
                row = [repr(self.times[k])]
                row += [repr(float(v)) for v in self.states[k]]
                row += [repr(float(v)) for v in self.inputs[k]]
                row += [repr(self.barrier_values[k]), repr(self.tube_values[k]), self.solver_statuses[k]]
                row += [repr(self.aux_barriers[name][k]) for name in aux]
                w.writerow(row)


def rk4_step(sys: ControlAffineSystem, x, u, dt: float) -> np.ndarray:
    """One RK4 step with the input held constant."""

    def F(z):
        return sys.f(z) + sys.g(z) @ u

    k1 = F(x)
    k2 = F(x + 0.5 * dt * k1)
    k3 = F(x + 0.5 * dt * k2)
    k4 = F(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate(
    sys: ControlAffineSystem,
    controller: Callable,
    x0,
    t_end: float,
    dt: float,
    barrier: Optional[Barrier] = None,
    schedule: Optional[ConstrictionSchedule] = None,
    aux_barriers: Sequence[Barrier] = (),
) -> Trajectory:
    """Fixed-step RK4 with zero-order hold.

    The controller is evaluated once at the start of each step. Rows are
    recorded at t_k = k dt for k = 0..N with N = round(t_end / dt); the
    last row holds the previous input and has status ``end``. Infeasible
    steps are logged, never fatal.
    """
    if not dt > 0 or not t_end >= dt:
        raise ConfigurationError(f"need dt > 0 and t_end >= dt, got dt={dt}, t_end={t_end}")
    barrier = barrier if barrier is not None else getattr(controller, "barrier", None)
    schedule = schedule if schedule is not None else getattr(controller, "schedule", None)
    if barrier is None:
        raise ConfigurationError("simulate needs a barrier to record")
    x = sys.check_state(x0).copy()
    N = int(round(t_end / dt))
    traj = Trajectory(dt=float(dt))
    u = np.zeros(sys.input_dim)
    for k in range(N + 1):
        t = k * dt
        if k < N:
            u, status = controller(x, t)
            u = np.asarray(u, dtype=float)
        else:
            status = "end"
        h = barrier(x)
        r = schedule.r(t) if schedule is not None else 0.0
        aux = {ab.label or f"aux{i}": ab(x) for i, ab in enumerate(aux_barriers)}
        traj.append(t, x, u, h, h + r, status, aux)
        if k == N:
            break
        x = rk4_step(sys, x, u, dt)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {k + 1} (t = {(k + 1) * dt:.6g})")
    return traj


def summarize(traj: Trajectory, schedule: Optional[ConstrictionSchedule], position_dim: int = 2) -> dict:
    """Summary statistics written next to each run."""
    T = schedule.T if schedule is not None else traj.times[-1]
    k_T = traj.value_at(min(T, traj.times[-1]))
    U = traj.U[:-1] if len(traj) > 1 else traj.U
    norms = np.linalg.norm(U, axis=1)
    x_T = traj.states[k_T]
    return {
        "r0": schedule.r0 if schedule is not None else 0.0,
        "T": T,
        "h_at_T": traj.barrier_values[k_T],
        "tube_min": float(min(traj.tube_values)),
        "peak_input_norm": float(norms.max()) if norms.size else 0.0,
        "infeasible_steps": len(traj.infeasible_steps),
        "terminal_position_norm": float(np.linalg.norm(x_T[:position_dim])),
    }


def fraction_saturated(traj: Trajectory, limit: float, level: float = 0.95) -> float:
    """Fraction of applied inputs with norm >= level * limit."""
    norms = np.linalg.norm(traj.U[:-1], axis=1)
    return float(np.mean(norms >= level * limit - 1e-12)) if norms.size else 0.0


