"""Receding-horizon planner with constricting-tube and obstacle path constraints.

Direct transcription over K knots with piecewise-constant inputs. The
dynamics are eliminated by Euler rollout (``substeps`` Euler steps per
knot interval), and the resulting nonlinear program is solved by
sequential linearization: each iteration solves a dense QP in the input
increments with a trust-region box, accepted on merit decrease.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .barrier import Barrier
from .control import Trajectory
from .dynamics import ControlAffineSystem, state_jacobian
from .errors import ConfigurationError, SimulationError
from .qpsolve import OPTIMAL, QpProblem, solve_qp
from .schedule import ConstrictionSchedule

MERIT_PENALTY = 1e3
SLACK_WEIGHT = 1e4
STEP_TOL = 1e-6
VIOLATION_TOL = 1e-6
MAX_SQP_ITERATIONS = 30


@dataclass(frozen=True)
class NmpcProblem:
    """Reach-avoid planning problem.

    Cost: plan_dt * sum_k |u_k|^2 + beta |p_K|^2. Constraints at every
    knot k = 1..K: h(x_k) + r(t + k plan_dt) >= 0 and
    h_obs(x_k) >= obstacle_margin, plus |v| <= v_max, |omega| <= omega_max.
    """

    sys: ControlAffineSystem
    reach_barrier: Barrier
    schedule: ConstrictionSchedule
    obstacle: Optional[Barrier]
    horizon: float
    plan_dt: float = 0.05
    beta: float = 10.0
    v_max: float = 1.5
    omega_max: float = 2.0
    substeps: int = 10
    obstacle_margin: float = 0.05
    cold_start_omega: float = 0.1
    position_dim: int = 2

    def __post_init__(self):
        if not (self.horizon > self.plan_dt > 0):
            raise ConfigurationError(f"need horizon > plan_dt > 0, got {self.horizon}, {self.plan_dt}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if self.steps < 2:
            raise ConfigurationError("horizon must span at least two knots")
        if self.substeps < 1:
            raise ConfigurationError("substeps must be >= 1")
        if self.v_max < 0 or self.omega_max < 0:
            raise ConfigurationError("input bounds must be >= 0")
        if self.sys.input_dim != 2:
            raise ConfigurationError("the planner expects a two-input (v, omega) system")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.plan_dt))

    @property
    def bounds(self) -> np.ndarray:
        return np.array([self.v_max, self.omega_max])


@dataclass
class PlanResult:
    input_sequence: np.ndarray  # (K, m)
    predicted_states: np.ndarray  # (K + 1, n)
    objective: float
    sqp_iterations: int
    converged: bool
    constraint_violation: float
    used_slack: bool = False
    failed: bool = False  # the first subproblem had no solution even with slack

    def diagnostics(self, t: float) -> dict:
        return {
            "t": float(t),
            "iterations": int(self.sqp_iterations),
            "converged": bool(self.converged),
            "violation": float(self.constraint_violation),
            "objective": float(self.objective),
            "used_slack": bool(self.used_slack),
            "failed": bool(self.failed),
        }


def rollout(p: NmpcProblem, x, U, sensitivities: bool = False):
    """Euler-roll the knot inputs U from x.

    Returns the knot states (K + 1, n) and, if requested, the knot
    sensitivities d x_k / d vec(U) as a (K + 1, n, K m) array.
    """
    sys = p.sys
    K, m = U.shape
    n = sys.state_dim
    h = p.plan_dt / p.substeps
    X = np.empty((K + 1, n))
    X[0] = x
    S = np.zeros((K + 1, n, K * m)) if sensitivities else None
    cur = np.array(x, dtype=float)
    Sk = np.zeros((n, K * m))
    eye = np.eye(n)
    for k in range(K):
        u = U[k]
        cols = slice(k * m, (k + 1) * m)
        for _ in range(p.substeps):
            g = sys.g(cur)
            if sensitivities:
                A = eye + h * state_jacobian(sys, cur, u)
                Sk = A @ Sk
                Sk[:, cols] += h * g
            cur = cur + h * (sys.f(cur) + g @ u)
        X[k + 1] = cur
        if sensitivities:
            S[k + 1] = Sk
    return X, S


def _objective(p: NmpcProblem, U, X) -> float:
    pK = X[-1, : p.position_dim]
    return float(p.plan_dt * np.sum(U * U) + p.beta * pK @ pK)


def _constraints(p: NmpcProblem, X, t: float):
    """Constraint values (>= 0 when satisfied) at knots 1..K, reach rows first."""
    K = X.shape[0] - 1
    vals = [p.reach_barrier(X[k]) + p.schedule.r(t + k * p.plan_dt) for k in range(1, K + 1)]
    if p.obstacle is not None:
        vals += [p.obstacle(X[k]) - p.obstacle_margin for k in range(1, K + 1)]
    return np.array(vals)


def _constraint_jacobian(p: NmpcProblem, X, S):
    K = X.shape[0] - 1
    rows = [p.reach_barrier.grad(X[k]) @ S[k] for k in range(1, K + 1)]
    if p.obstacle is not None:
        rows += [p.obstacle.grad(X[k]) @ S[k] for k in range(1, K + 1)]
    return np.array(rows)


def _merit(J: float, c: np.ndarray) -> float:
    return J + MERIT_PENALTY * float(np.sum(np.maximum(0.0, -c)))


def _violation(c: np.ndarray) -> float:
    return float(max(0.0, -c.min())) if c.size else 0.0


def _gauss_newton(p: NmpcProblem, U, X, S):
    """Gauss-Newton Hessian and exact gradient of the objective in vec(U)."""
    d = U.size
    pos = p.position_dim
    Jp = S[-1, :pos, :]
    H = 2.0 * p.plan_dt * np.eye(d) + 2.0 * p.beta * Jp.T @ Jp
    grad = 2.0 * p.plan_dt * U.reshape(-1) + 2.0 * p.beta * Jp.T @ X[-1, :pos]
    return 0.5 * (H + H.T), grad


def _damped_bfgs(B, s, y):
    """Powell-damped BFGS update; keeps B positive definite."""
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 1e-16:
        return B
    sy = float(s @ y)
    theta = 1.0 if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
    r = theta * y + (1.0 - theta) * Bs
    B = B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / float(s @ r)
    return 0.5 * (B + B.T)


def _step_qp(p, U, H, grad, G, c, radius):
    """Solve the linearized subproblem for the increment dU.

    Minimizes grad . dU + dU' H dU / 2 subject to c + G dU >= 0, the input
    box and |dU|_inf <= radius. Slack variables on the barrier rows are
    added only when the hard linearization is infeasible. Returns
    (dU, used_slack, multipliers of the barrier rows) or None.
    """
    K, m = U.shape
    d = K * m
    bnd = np.tile(p.bounds, K)
    lower = np.maximum(-bnd - U.reshape(-1), -radius)
    upper = np.minimum(bnd - U.reshape(-1), radius)
    lower = np.minimum(lower, upper)
    # rows c + G dU >= 0 written as -G dU <= c
    sol = solve_qp(QpProblem(H, grad, -G, c, lower, upper))
    if sol.status == OPTIMAL:
        return sol.u.reshape(K, m), False, sol.ineq_multipliers
    nc = G.shape[0]
    Hs = np.zeros((d + nc, d + nc))
    Hs[:d, :d] = H
    Hs[d:, d:] = 1e-6 * np.eye(nc)
    qs = np.concatenate([grad, np.full(nc, SLACK_WEIGHT)])
    Gs = np.hstack([-G, -np.eye(nc)])
    sol = solve_qp(
        QpProblem(Hs, qs, Gs, c, np.concatenate([lower, np.zeros(nc)]), np.concatenate([upper, np.full(nc, np.inf)]))
    )
    if sol.status != OPTIMAL:
        return None
    return sol.u[:d].reshape(K, m), True, sol.ineq_multipliers


def cold_start(p: NmpcProblem) -> np.ndarray:
    """Zero speed with a small constant turn rate.

    The bias breaks the mirror symmetry that arises when the obstacle
    sits exactly on the line to the target.
    """
    U = np.zeros((p.steps, 2))
    U[:, 1] = p.cold_start_omega
    return U


def shift(prev: PlanResult, knots: int = 1) -> np.ndarray:
    """Drop the first ``knots`` inputs and repeat the last one."""
    U = prev.input_sequence
    knots = min(knots, U.shape[0] - 1)
    return np.vstack([U[knots:], np.repeat(U[-1:], knots, axis=0)])


def _trial(p: NmpcProblem, x, t: float, U):
    U = np.clip(U, -p.bounds, p.bounds)
    X, S = rollout(p, x, U, sensitivities=True)
    J = _objective(p, U, X)
    c = _constraints(p, X, t)
    return U, X, S, J, c, _merit(J, c)


def plan(p: NmpcProblem, x, t: float, warm_start=None) -> PlanResult:
    """One SQP solve from state x at time t.

    ``warm_start`` is a PlanResult (shifted by one knot) or an explicit
    (K, 2) input array; None means :func:`cold_start`. The QP Hessian
    starts from the Gauss-Newton matrix and is refined by damped BFGS
    updates of the Lagrangian, since the terminal residual is not small.
    """
    if t > p.schedule.T + p.horizon:
        raise ConfigurationError(f"planning time {t} exceeds T + horizon")
    x = p.sys.check_state(x)
    if warm_start is None:
        U = cold_start(p)
    elif isinstance(warm_start, PlanResult):
        U = shift(warm_start)
    else:
        U = np.array(warm_start, dtype=float).reshape(p.steps, 2)

    U, X, S, J, c, merit = _trial(p, x, t, U)
    H, grad = _gauss_newton(p, U, X, S)
    G = _constraint_jacobian(p, X, S)
    radius = 1.0
    used_slack = False
    converged = False
    failed = False
    iterations = 0
    while iterations < MAX_SQP_ITERATIONS:
        iterations += 1
        step = _step_qp(p, U, H, grad, G, c, radius)
        if step is None:
            failed = iterations == 1
            break
        dU, slack, mu = step
        used_slack = used_slack or slack
        if np.abs(dU).max() <= STEP_TOL:
            converged = _violation(c) <= VIOLATION_TOL
            break
        accepted = False
        while radius > 1e-9:
            trial = _trial(p, x, t, U + dU)
            if trial[-1] >= merit:
                # second-order correction: shift the linearized rows by the
                # curvature error seen at the trial point and try once more
                soc = _step_qp(p, U, H, grad, G, trial[4] - G @ dU.reshape(-1), radius)
                if soc is not None:
                    soc_trial = _trial(p, x, t, U + soc[0])
                    if soc_trial[-1] < trial[-1]:
                        trial = soc_trial
                        used_slack = used_slack or soc[1]
            if trial[-1] < merit:
                if np.abs(dU).max() >= 0.99 * radius:
                    radius = min(2.0 * radius, 4.0)
                step_taken = (trial[0] - U).reshape(-1)
                U, X, S, J, c, merit = trial
                _, grad_new = _gauss_newton(p, U, X, S)
                G_new = _constraint_jacobian(p, X, S)
                y = (grad_new - G_new.T @ mu[: G_new.shape[0]]) - (grad - G.T @ mu[: G.shape[0]])
                H = _damped_bfgs(H, step_taken, y)
                grad, G = grad_new, G_new
                accepted = True
                break
            radius = 0.5 * min(radius, float(np.abs(dU).max()))
            step = _step_qp(p, U, H, grad, G, c, radius)
            if step is None:
                break
            dU, slack, mu = step
            used_slack = used_slack or slack
        if not accepted:
            # no merit decrease inside any trust region: stationary for the merit
            converged = np.abs(dU).max() <= STEP_TOL and _violation(c) <= VIOLATION_TOL
            break
    return PlanResult(
        input_sequence=U,
        predicted_states=X,
        objective=J,
        sqp_iterations=iterations,
        converged=bool(converged),
        constraint_violation=_violation(c),
        used_slack=used_slack,
        failed=failed,
    )


@dataclass
class RecedingHorizonResult:
    trajectory: Trajectory
    plans: list = field(default_factory=list)  # diagnostics dicts, one per replan
    failures: list = field(default_factory=list)  # step indices where the previous input was reused


def receding_horizon_run(
    p: NmpcProblem,
    x0,
    t_end: float,
    sim_dt: float = 0.005,
    replan_every: int = 10,
    warm_start: bool = True,
) -> RecedingHorizonResult:
    """Closed loop with forward-Euler steps of sim_dt.

    Every ``replan_every`` steps a new plan is computed (warm-started from
    the previous plan shifted by one knot); in between, the plan input for
    the elapsed knot interval is held. A plan whose linearized QP fails
    outright is discarded and the previous input is reapplied.
    """
    if not (0 < sim_dt <= p.plan_dt):
        raise ConfigurationError("need 0 < sim_dt <= plan_dt")
    if replan_every < 1 or replan_every * sim_dt > p.plan_dt + 1e-12:
        raise ConfigurationError("need replan_every * sim_dt <= plan_dt")
    if not t_end >= sim_dt:
        raise ConfigurationError("t_end must be >= sim_dt")
    sys = p.sys
    x = sys.check_state(x0).copy()
    N = int(round(t_end / sim_dt))
    out = RecedingHorizonResult(Trajectory(dt=float(sim_dt)))
    current: Optional[PlanResult] = None
    plan_time = 0.0
    u = np.zeros(2)
    for k in range(N + 1):
        t = k * sim_dt
        if k == N:
            status = "end"
        elif k % replan_every == 0:
            result = plan(p, x, t, current if warm_start else None)
            out.plans.append(result.diagnostics(t))
            if result.failed or not np.all(np.isfinite(result.input_sequence)):
                out.failures.append(k)
                status = "plan_failed"
            else:
                current, plan_time = result, t
                status = "optimal" if result.converged else (
                    "suboptimal" if result.constraint_violation <= VIOLATION_TOL else "violated"
                )
        else:
            status = "hold"
        if k < N and status != "plan_failed" and current is not None:
            idx = min(int(math.floor((t - plan_time) / p.plan_dt + 1e-9)), p.steps - 1)
            u = current.input_sequence[idx].copy()
        h = p.reach_barrier(x)
        aux = {"h_obs": p.obstacle(x)} if p.obstacle is not None else {}
        out.trajectory.append(t, x, u, h, h + p.schedule.r(t), status, aux)
        if k == N:
            break
        x = x + sim_dt * (sys.f(x) + sys.g(x) @ u)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {k + 1}")
    return out
