"""Barrier authority, worst-case authority and minimum recovery time.

The barrier authority sigma(x) is the largest dh/dt reachable at x with an
admissible input. A linear-schedule tube is feasible everywhere iff the
constant constriction rate r0/T never exceeds sigma on the tube boundary,
which gives the design-time bound T >= r0 / sigma_min.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .barrier import Barrier, lie_derivatives
from .dynamics import ControlAffineSystem
from .errors import CertificateError, ConfigurationError, ContractViolation
from .schedule import ConstrictionSchedule

CLOSED_FORM_LINEAR = "closed_form_linear"
SAMPLED = "sampled"


@dataclass(frozen=True)
class InputSet:
    """Admissible inputs: a Euclidean ball or a box, both centred at 0.

    For ``box`` the bound may be a scalar or one value per input.
    """

    kind: str
    u_max: object
    dim: int

    def __post_init__(self):
        if self.kind not in ("ball2", "box"):
            raise ConfigurationError(f"input set kind must be 'ball2' or 'box', got {self.kind!r}")
        bound = np.asarray(self.u_max, dtype=float)
        if self.kind == "ball2" and bound.ndim != 0:
            raise ConfigurationError("ball2 input set takes a scalar u_max")
        if bound.ndim == 1 and bound.shape != (self.dim,):
            raise ConfigurationError(f"box bounds must have length {self.dim}")
        if np.any(bound < 0) or not np.all(np.isfinite(bound)):
            raise ConfigurationError(f"u_max must be finite and >= 0, got {self.u_max}")

    @property
    def bounds(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.u_max, dtype=float), (self.dim,))

    @property
    def radius(self) -> float:
        """Largest Euclidean norm of an admissible input."""
        if self.kind == "ball2":
            return float(self.u_max)
        return float(np.linalg.norm(self.bounds))

    def support(self, w) -> float:
        return support_function(self, w)

    def maximizer(self, w) -> np.ndarray:
        """An input attaining max over the set of w . u."""
        w = np.asarray(w, dtype=float)
        if self.kind == "ball2":
            nw = np.linalg.norm(w)
            return np.zeros(self.dim) if nw == 0 else float(self.u_max) * w / nw
        return self.bounds * np.sign(w)

    def contains(self, u, tol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float)
        if self.kind == "ball2":
            return bool(np.linalg.norm(u) <= float(self.u_max) + tol)
        return bool(np.all(np.abs(u) <= self.bounds + tol))


def support_function(U: InputSet, w) -> float:
    """max_{u in U} w . u: u_max |w|_2 for the ball, sum_i u_max_i |w_i| for the box."""
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape != (U.dim,):
        raise ContractViolation(f"support direction has length {w.size}, input set has dim {U.dim}")
    if U.kind == "ball2":
        return float(U.u_max) * float(np.linalg.norm(w))
    return float(U.bounds @ np.abs(w))


def barrier_authority(b: Barrier, sys: ControlAffineSystem, U: InputSet, x) -> float:
    """sigma(x) = max_{u in U} L_g h(x) u + L_f h(x)."""
    lie = lie_derivatives(b, sys, x)
    return support_function(U, lie.lg_h) + lie.lf_h


def local_feasibility(sigma: float, rdot: float) -> bool:
    """True iff the constriction rate can be met at a boundary state: |rdot| <= sigma."""
    return abs(rdot) <= sigma


def t_min(r0: float, sigma_min: float) -> float:
    """Minimum deadline r0 / sigma_min; infinite when sigma_min <= 0."""
    if sigma_min <= 0:
        return math.inf
    if r0 == 0:
        return 0.0
    return r0 / sigma_min


@dataclass
class FeasibilityCertificate:
    """Worst-case authority and the deadline bound it implies.

    For ``method == "sampled"`` the value is the smallest authority found,
    hence an upper bound on the true infimum (``bound == "upper"``).
    """

    sigma_min: float
    t_min: float
    method: str
    worst_point: Optional[tuple] = None  # (state, time)
    sample_count: int = 0
    refinement_iterations: int = 0
    seed: Optional[int] = None
    r0: float = 0.0
    bound: str = "exact"
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        wp = None
        if self.worst_point is not None:
            wp = {"state": [float(v) for v in self.worst_point[0]], "time": float(self.worst_point[1])}
        return {
            "sigma_min": float(self.sigma_min),
            "t_min": _json_float(self.t_min),
            "method": self.method,
            "worst_point": wp,
            "seed": self.seed,
            "samples": int(self.sample_count),
            "refinement_iterations": int(self.refinement_iterations),
            "r0": float(self.r0),
            "bound": self.bound,
            **{k: _json_float(v) if isinstance(v, float) else v for k, v in self.details.items()},
        }


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


def _sqrtm_psd(P):
    w, V = np.linalg.eigh(P)
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def sigma_min_linear_closed_form(A, B, P, c: float, u_max: float, r0: float = 0.0) -> FeasibilityCertificate:
    """Closed form 2c (mu_min u_max - lambda_max) for xdot = Ax + Bu, h = c - x'Px.

    mu_min = min_{|v|=1} |B' P^{1/2} v| is the weakest input gain on the
    normalized ellipsoid (zero whenever m < n), and lambda_max is the
    largest eigenvalue of the symmetric part of P^{1/2} A P^{-1/2}, i.e.
    the maximum of v' P^{1/2} A P^{-1/2} v over unit v.

    On the boundary x'Px = c the input term scales with sqrt(c) and the
    drift term with c, so ``details["boundary_lower_bound"]`` holds
    2 (sqrt(c) mu_min u_max - c lambda_max), a valid lower bound on sigma
    there. The headline value keeps the 2c factor on both terms; it agrees
    with the bound at c = 1 and exceeds it when c > 1.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if np.linalg.eigvalsh(P)[0] <= 0:
        raise ConfigurationError("closed-form certificate needs a positive definite P")
    if not c > 0:
        raise ConfigurationError("closed-form certificate needs c > 0")
    Ph, Pih = _sqrtm_psd(P)
    gain = Ph @ B @ B.T @ Ph
    mu_min = math.sqrt(max(0.0, float(np.linalg.eigvalsh(gain)[0])))
    M = Ph @ A @ Pih
    lam_max = float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])
    sigma = 2.0 * c * (mu_min * u_max - lam_max)
    bound = 2.0 * (math.sqrt(c) * mu_min * u_max - c * lam_max)
    return FeasibilityCertificate(
        sigma_min=sigma,
        t_min=t_min(r0, sigma),
        method=CLOSED_FORM_LINEAR,
        r0=float(r0),
        details={"mu_min": mu_min, "lambda_max": lam_max, "boundary_lower_bound": bound},
    )


def _project_to_level(b: Barrier, x, level: float, max_iter: int = 50, tol: float = 1e-10):
    """Damped Newton projection of x onto {h = level}; None on failure."""
    x = np.array(x, dtype=float)
    tol = tol * max(1.0, abs(level))
    err = b(x) - level
    for _ in range(max_iter):
        if abs(err) <= tol:
            return x
        grad = b.grad(x)
        gg = grad @ grad
        if gg < 1e-300:
            return None
        step = -err / gg * grad
        alpha = 1.0
        while alpha > 1e-6:
            trial = x + alpha * step
            e_trial = b(trial) - level
            if abs(e_trial) < abs(err):
                x, err = trial, e_trial
                break
            alpha *= 0.5
        else:
            return None
    return x if abs(err) <= tol else None


def _sample_boundary(b: Barrier, level: float, count: int, rng, domain):
    """Draw ``count`` states with h(x) = level."""
    quad = b.quadratic
    if quad is not None and np.linalg.eigvalsh(quad[1])[0] > 0:
        c, P, xc = quad
        rho2 = c - level
        if rho2 <= 0:
            raise CertificateError(f"tube boundary h = {level:.6g} is empty")
        _, Pih = _sqrtm_psd(P)
        v = rng.standard_normal((count, P.shape[0]))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return list(xc + math.sqrt(rho2) * v @ Pih.T)
    if domain is None:
        raise CertificateError("a sampling domain (lo, hi) is required for non-quadratic barriers")
    lo, hi = (np.asarray(d, dtype=float) for d in domain)
    out = []
    for x in rng.uniform(lo, hi, (count, lo.size)):
        y = _project_to_level(b, x, level)
        if y is not None:
            out.append(y)
    return out


def _refine(b, sys, U, x, level, steps, fd_step=1e-6):
    """Projected gradient descent of sigma along {h = level}."""
    sig = barrier_authority(b, sys, U, x)
    step_len = 0.1 * max(1.0, float(np.linalg.norm(x)))
    accepted = 0
    n = x.size
    for _ in range(steps):
        grad = np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = fd_step * max(1.0, abs(x[i]))
            grad[i] = (barrier_authority(b, sys, U, x + e) - barrier_authority(b, sys, U, x - e)) / (2 * e[i])
        normal = b.grad(x)
        grad -= (grad @ normal) / max(normal @ normal, 1e-300) * normal
        gnorm = np.linalg.norm(grad)
        if gnorm < 1e-14:
            break
        improved = False
        while step_len > 1e-10:
            trial = _project_to_level(b, x - step_len * grad / gnorm, level)
            if trial is not None:
                s_trial = barrier_authority(b, sys, U, trial)
                if s_trial < sig:
                    x, sig = trial, s_trial
                    accepted += 1
                    improved = True
                    step_len *= 1.5
                    break
            step_len *= 0.5
        if not improved:
            break
    return x, sig, accepted


def sigma_min_sampled(
    b: Barrier,
    sys: ControlAffineSystem,
    U: InputSet,
    s: ConstrictionSchedule,
    time_grid: int = 21,
    boundary_samples: int = 200,
    refine_steps: int = 20,
    seed: int = 0,
    domain=None,
    refine_top: int = 5,
) -> FeasibilityCertificate:
    """Smallest barrier authority found on the tube boundary over [0, T].

    On a uniform time grid, states on {h = -r(t)} are drawn (exactly on
    the ellipsoid for positive definite quadratic barriers, by Newton
    projection of uniform draws from ``domain`` otherwise), sigma is
    evaluated at each, and the ``refine_top`` lowest are polished by
    projected gradient descent along the boundary. The result is an upper
    bound on the infimum.
    """
    if min(time_grid, boundary_samples) < 1 or refine_steps < 0:
        raise ConfigurationError("sample counts must be >= 1")
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, s.T, time_grid) if time_grid > 1 else np.array([s.T])
    scored = []  # (sigma, index, state, time, level)
    for t in times:
        level = -s.r(t)
        for x in _sample_boundary(b, level, boundary_samples, rng, domain):
            scored.append((barrier_authority(b, sys, U, x), len(scored), x, float(t), level))
    if not scored:
        raise CertificateError("no tube boundary states could be sampled")
    # (value, sample index) ordering keeps the witness deterministic
    scored.sort(key=lambda item: (item[0], item[1]))
    best_sigma, _, best_x, best_t, _ = scored[0]
    refinements = 0
    for sig, idx, x, t, level in scored[:refine_top]:
        x_ref, sig_ref, acc = _refine(b, sys, U, x, level, refine_steps)
        refinements += acc
        if sig_ref < best_sigma:
            best_sigma, best_x, best_t = sig_ref, x_ref, t
    return FeasibilityCertificate(
        sigma_min=float(best_sigma),
        t_min=t_min(s.r0, best_sigma),
        method=SAMPLED,
        worst_point=(np.asarray(best_x), best_t),
        sample_count=len(scored),
        refinement_iterations=refinements,
        seed=seed,
        r0=s.r0,
        bound="upper",
    )
