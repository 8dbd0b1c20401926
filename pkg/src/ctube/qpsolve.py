"""Small dense convex QPs.

    minimize    1/2 u^T H u + q^T u
    subject to  G u <= g,  lower <= u <= upper

The engine is a dual active-set method (Goldfarb-Idnani): it starts at the
unconstrained minimizer and adds violated constraints one at a time, so
every iterate is dual feasible and a primal infeasible problem is detected
exactly (a violated row that cannot be added without unbounded dual
ascent). The QR factorization of the scaled active normals is updated
column by column as constraints enter and leave.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import qr_delete, qr_insert, solve_triangular

from .errors import ContractViolation

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max_iterations"

_VIOLATION_TOL = 1e-11  # on normalized rows; certified feasibility is 1e-9
_ZERO_STEP_TOL = 1e-13
_CANONICAL_TOL = 1e-9


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    q: np.ndarray
    G: np.ndarray = None
    g: np.ndarray = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        d = H.shape[0]
        if H.shape != (d, d):
            raise ContractViolation(f"H must be square, got {H.shape}")
        if not np.allclose(H, H.T, rtol=0, atol=1e-12 * max(1.0, np.abs(H).max())):
            raise ContractViolation("H must be symmetric")
        if np.linalg.eigvalsh(H)[0] < 1e-9:
            raise ContractViolation("H must be positive definite (min eigenvalue >= 1e-9)")
        q = np.asarray(self.q, dtype=float).reshape(-1)
        if q.shape != (d,):
            raise ContractViolation(f"q must have length {d}")
        G = np.zeros((0, d)) if self.G is None else np.asarray(self.G, dtype=float).reshape(-1, d)
        g = np.zeros(0) if self.g is None else np.asarray(self.g, dtype=float).reshape(-1)
        if G.shape[0] != g.shape[0]:
            raise ContractViolation("G and g have different numbers of rows")
        lower = np.full(d, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        upper = np.full(d, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if lower.shape != (d,) or upper.shape != (d,):
            raise ContractViolation(f"bounds must have length {d}")
        if np.any(lower > upper):
            raise ContractViolation("lower bound exceeds upper bound")
        for name, val in (("H", H), ("q", q), ("G", G), ("g", g), ("lower", lower), ("upper", upper)):
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def rows(self):
        """All constraints as (normals A, offsets b) with A u >= b.

        Order: rows of G, then upper bounds, then lower bounds; bound rows
        are indexed by variable so that ``k + i`` / ``k + d + i`` name the
        upper / lower bound on u_i regardless of which bounds are finite.
        """
        d, k = self.dim, self.G.shape[0]
        eye = np.eye(d)
        A = np.vstack([-self.G, -eye, eye])
        b = np.concatenate([-self.g, -self.upper, self.lower])
        finite = np.isfinite(b)
        finite[:k] = True
        return A, b, finite


@dataclass
class QpSolution:
    u: np.ndarray
    status: str
    kkt_residual: float = np.inf
    active_set: list = field(default_factory=list)
    iterations: int = 0
    ineq_multipliers: np.ndarray = None
    lower_multipliers: np.ndarray = None
    upper_multipliers: np.ndarray = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_residual(p: QpProblem, u, mu, lam_lo, lam_up) -> float:
    """Largest violation among stationarity, feasibility, dual sign and complementarity."""
    stat = p.H @ u + p.q + p.G.T @ mu + lam_up - lam_lo
    slack_g = p.g - p.G @ u
    with np.errstate(invalid="ignore"):
        slack_up = np.where(np.isfinite(p.upper), p.upper - u, np.inf)
        slack_lo = np.where(np.isfinite(p.lower), u - p.lower, np.inf)
    slacks = np.concatenate([slack_g, slack_up, slack_lo])
    mults = np.concatenate([mu, lam_up, lam_lo])
    primal = max(0.0, float(-slacks.min())) if slacks.size else 0.0
    dual = max(0.0, float(-mults.min())) if mults.size else 0.0
    finite = np.isfinite(slacks)
    comp = float(np.abs(mults[finite] * slacks[finite]).max()) if finite.any() else 0.0
    return max(float(np.abs(stat).max()), primal, dual, comp)


def _split_multipliers(p: QpProblem, active, mult):
    d, k = p.dim, p.G.shape[0]
    full = np.zeros(k + 2 * d)
    full[list(active)] = mult
    return full[:k], full[k + d:], full[k:k + d]


def _equality_solve(p: QpProblem, A, b, active):
    """Solve the KKT system with the rows ``active`` held at equality."""
    d = p.dim
    na = len(active)
    if na == 0:
        return np.linalg.solve(p.H, -p.q), np.zeros(0)
    N = A[active].T
    K = np.zeros((d + na, d + na))
    K[:d, :d] = p.H
    K[:d, d:] = -N
    K[d:, :d] = -N.T
    rhs = np.concatenate([-p.q, -b[active]])
    sol = np.linalg.solve(K, rhs)
    return sol[:d], sol[d:]


def _finish(p, A, b, x, active, mult, iterations):
    # Re-solve on the sorted final working set. The result then depends on
    # the active set only, not on the path (warm or cold) that found it.
    order = np.argsort(active, kind="stable")
    active = [int(active[i]) for i in order]
    mult = np.asarray(mult, dtype=float)[order]
    try:
        x2, m2 = _equality_solve(p, A, b, active)
        res2 = kkt_residual(p, x2, *_split_multipliers(p, active, m2))
        if res2 <= _CANONICAL_TOL or res2 < kkt_residual(p, x, *_split_multipliers(p, active, mult)):
            x, mult = x2, m2
    except np.linalg.LinAlgError:
        pass
    mu, lo, up = _split_multipliers(p, active, mult)
    res = kkt_residual(p, x, mu, lo, up)
    return QpSolution(x, OPTIMAL, res, active, iterations, mu, lo, up)


def _try_warm(p, A, b, finite, warm):
    warm = [i for i in warm if 0 <= i < len(b) and finite[i]]
    if not warm:
        return None
    try:
        x, m = _equality_solve(p, A, b, warm)
    except np.linalg.LinAlgError:
        return None
    scale = np.linalg.norm(A, axis=1)
    scale[scale == 0.0] = 1.0
    s = (A[finite] @ x - b[finite]) / scale[finite]
    if np.any(s < -_VIOLATION_TOL * (1 + np.abs(b[finite]))) or np.any(m < -1e-12):
        return None
    return _finish(p, A, b, x, list(warm), np.maximum(m, 0.0), 1)


def solve_qp(p: QpProblem, warm_start: Sequence[int] | None = None, max_iter: int | None = None) -> QpSolution:
    """Solve ``p``; optionally try a previous active set first.

    A warm start is accepted only if the equality-constrained solution on
    that set is primal and dual feasible, which makes it the (unique)
    optimum; otherwise the cold dual active-set iteration runs. Hitting
    the iteration cap returns status ``max_iterations``, never ``optimal``.
    """
    A, b, finite = p.rows()
    d = p.dim
    if warm_start is not None:
        sol = _try_warm(p, A, b, finite, warm_start)
        if sol is not None:
            return sol

    nrows = A.shape[0]
    cap = max_iter if max_iter is not None else 100 * (d + int(finite.sum()))
    row_norm = np.linalg.norm(A, axis=1)
    row_norm[row_norm == 0.0] = 1.0
    tol = _VIOLATION_TOL * (1.0 + np.abs(np.where(finite, b, 0.0)))
    L = np.linalg.cholesky(p.H)
    Linv = solve_triangular(L, np.eye(d), lower=True)  # J = L^-T in the usual notation

    x = -(Linv.T @ (Linv @ p.q))
    active: list[int] = []
    mult = np.zeros(0)
    iterations = 0
    candidate = finite.copy()
    # full QR of Linv @ A[active].T: Q is d x d, R is d x len(active)
    Q = np.eye(d)
    R = np.zeros((d, 0))

    while True:
        s = np.full(nrows, np.inf)
        s[candidate] = (A[candidate] @ x - b[candidate]) / row_norm[candidate]
        s[active] = np.inf
        viol = -s - tol / row_norm
        if not np.any(viol > 0):
            return _finish(p, A, b, x, active, mult, iterations)
        # most violated normalized row; argmax returns the lowest index on ties
        pidx = int(np.argmax(np.where(viol > 0, -s, -np.inf)))
        n_p = A[pidx]
        w = Linv @ n_p
        mult_plus = np.append(mult, 0.0)

        while True:
            iterations += 1
            if iterations > cap:
                return QpSolution(
                    x, MAX_ITERATIONS, np.inf, sorted(int(i) for i in active), iterations,
                    *_split_multipliers(p, active, mult_plus[:-1]),
                )
            na = len(active)
            qw = Q.T @ w
            if na:
                r = solve_triangular(R[:na, :na], qw[:na], check_finite=False)
            else:
                r = np.zeros(0)
            z = Linv.T @ (Q[:, na:] @ qw[na:]) if na < d else np.zeros(d)
            # dual step limit: first active multiplier to reach zero
            t1, drop = np.inf, -1
            for j in range(na):
                if r[j] > _ZERO_STEP_TOL:
                    tj = mult_plus[j] / r[j]
                    if tj < t1:
                        t1, drop = tj, j
            zn = float(z @ n_p)
            slack = float(n_p @ x - b[pidx])
            t2 = -slack / zn if zn > _ZERO_STEP_TOL * max(1.0, n_p @ n_p) else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                return QpSolution(
                    x, INFEASIBLE, np.inf, sorted(int(i) for i in active), iterations,
                    *_split_multipliers(p, active, mult),
                )
            if np.isfinite(t2):
                x = x + t * z
            mult_plus[:-1] -= t * r
            mult_plus[-1] += t
            if t2 <= t1:
                active.append(pidx)
                mult = mult_plus
                Q, R = qr_insert(Q, R, w, na, which="col", check_finite=False)
                break
            # partial step: drop the blocking constraint and retry the same row
            del active[drop]
            mult_plus = np.delete(mult_plus, drop)
            mult_plus[:-1] = np.maximum(mult_plus[:-1], 0.0)
            Q, R = qr_delete(Q, R, drop, 1, which="col", check_finite=False)


def solve_min_norm_ball(a, b: float, u_max: float) -> QpSolution:
    """Closed form for  min |u|^2  s.t.  a.u >= b,  |u|_2 <= u_max.

    The constraint is met most cheaply along a, with norm b/|a|; it is
    feasible iff that norm fits in the ball, so no clipping case arises.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if b <= 0:
        return QpSolution(np.zeros_like(a), OPTIMAL, 0.0, [], 0)
    na = float(np.linalg.norm(a))
    if na == 0.0 or b > u_max * na * (1.0 + 1e-12):
        return QpSolution(np.zeros_like(a), INFEASIBLE, np.inf, [], 0)
    u = (b / na**2) * a
    nu = np.linalg.norm(u)
    if nu > u_max:  # only within the 1e-12 roundoff band above
        u *= u_max / nu
    return QpSolution(u, OPTIMAL, 0.0, [0], 0)


def brute_force_oracle(p: QpProblem, grid_resolution: float = 0.05, rng=None,
                       samples: int = 20000, sweeps: int = 20000):
    """Reference minimizer for tests, independent of :func:`solve_qp`.

    Search stage: a uniform grid over the box (d <= 3, finite bounds) or
    random draws around the unconstrained minimizer (d <= 8) locates the
    best feasible point; ``None`` is returned if none is found. Polish
    stage: projected coordinate ascent on the dual (Hildreth's method),
    whose iterates converge to the exact minimizer for feasible problems.
    The polished point is kept only if it is feasible and no worse; with
    no feasible point from either stage the result is ``None``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    A, b, finite = p.rows()
    A, b = A[finite], b[finite]
    d = p.dim

    def feasible(U):
        return np.all(U @ A.T - b >= -1e-9, axis=-1)

    def obj(U):
        return 0.5 * np.einsum("...i,ij,...j->...", U, p.H, U) + U @ p.q

    u_free = np.linalg.solve(p.H, -p.q)
    box_ok = np.all(np.isfinite(p.lower)) and np.all(np.isfinite(p.upper))
    if d <= 3 and box_ok:
        axes = [np.arange(lo, hi + grid_resolution / 2, grid_resolution) for lo, hi in zip(p.lower, p.upper)]
        cand = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    else:
        spread = 2.0 + np.abs(u_free).max() + (np.abs(b).max() if b.size else 0.0)
        cand = u_free + spread * rng.standard_normal((samples, d)) * rng.uniform(0, 1, (samples, 1))
        cand = np.clip(cand, p.lower, p.upper)
    cand = np.vstack([cand, u_free, np.clip(u_free, p.lower, p.upper)])
    ok = feasible(cand)
    best = cand[ok][np.argmin(obj(cand[ok]))] if ok.any() else None

    # Hildreth: maximize the dual over lam >= 0, one coordinate at a time
    Hinv = np.linalg.inv(p.H)
    M = A @ Hinv @ A.T
    lam = np.zeros(len(b))
    for _ in range(sweeps):
        change = 0.0
        for i in range(len(b)):
            if M[i, i] <= 0:
                continue
            u = Hinv @ (A.T @ lam - p.q)
            new = max(0.0, lam[i] + (b[i] - A[i] @ u) / M[i, i])
            change = max(change, abs(new - lam[i]))
            lam[i] = new
        if change < 1e-13:
            break
    polished = Hinv @ (A.T @ lam - p.q)
    if feasible(polished[None])[0] and (best is None or obj(polished) <= obj(best) + 1e-9):
        return polished
    return best
