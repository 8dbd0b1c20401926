import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from ctube.barrier import lie_derivatives, quadratic_barrier
from ctube.certificate import InputSet, barrier_authority
from ctube.control import (
    Controller,
    ControllerSpec,
    Trajectory,
    cbf_constraint,
    cbf_qp_control,
    fraction_saturated,
    hocbf_qp_control,
    hocbf_terms,
    pt_clf_baseline_control,
    rk4_step,
    simulate,
    summarize,
)
from ctube.dynamics import builtin, linear_system
from ctube.errors import ConfigurationError, DomainError, SimulationError
from ctube.schedule import make_schedule

from .conftest import scenario


def one_d_spec(r0=3.0, T=2.0, u_max=1.0, **kw):
    sys = linear_system([[0.0]], [[1.0]])
    spec = ControllerSpec(
        "cbf_qp", quadratic_barrier(1.0, [[1.0]]), make_schedule("linear", r0, T), InputSet("ball2", u_max, 1), **kw
    )
    return spec, sys


def test_inactive_constraint_gives_zero():
    spec, sys = one_d_spec()
    u, status = cbf_qp_control(spec, sys, np.array([0.1]), 0.5)
    assert status == "optimal" and u == pytest.approx([0.0])


@pytest.mark.parametrize("x", [1.2, -1.7, 1.6, 2.0])
def test_one_d_boundary_law(x):
    r0, T, u_max = 3.0, 2.0, 1.0
    spec, sys = one_d_spec(r0, T, u_max)
    s = spec.schedule
    # time at which x sits on the tube boundary: 1 - x^2 + r(t) = 0
    t = T * (1 - (x * x - 1) / r0)
    u, status = cbf_qp_control(spec, sys, np.array([x]), t)
    feasible = r0 / T <= 2 * abs(x) * u_max
    assert (status == "optimal") == feasible
    if feasible:
        assert u[0] == pytest.approx(-math.copysign(1, x) * (r0 / T) / (2 * abs(x)))
    assert abs(s.rdot(t)) <= barrier_authority(spec.barrier, sys, spec.input_set, np.array([x])) or not feasible


def test_infeasible_fallback_pushes_inward():
    spec, sys = one_d_spec(r0=3.0, T=0.5)
    u, status = Controller(spec, sys)(np.array([2.0]), 0.0)
    assert status == "infeasible" and u == pytest.approx([-1.0])


def test_standard_cbf_reduction():
    rng = np.random.default_rng(0)
    sys = builtin("multiagent")
    b = quadratic_barrier(0.5, np.eye(16))
    spec = ControllerSpec("cbf_qp", b, make_schedule("linear", 0.0, 6.4), InputSet("box", 2.0, 8), alpha=0.9)
    for _ in range(20):
        x = 0.1 * rng.standard_normal(16)
        t = rng.uniform(0, 10)
        a, rhs = cbf_constraint(spec, sys, x, t)
        lie = lie_derivatives(b, sys, x)
        assert np.abs(a - lie.lg_h).max() <= 1e-12
        assert abs(rhs - (-lie.lf_h - 0.9 * b(x))) <= 1e-12


def test_hocbf_initial_tube_and_rest_state():
    cfg = scenario("hocbf_di")
    spec, sys = cfg.controller_spec(), cfg.system()
    psi0, _, _, _ = hocbf_terms(spec, sys, cfg.x0, 0.0)
    assert psi0 == pytest.approx(0.0, abs=1e-12)
    t = 24.0
    _, psi1, a, b = hocbf_terms(spec, sys, np.zeros(4), t)
    r, rdot, rddot = spec.schedule.eval(t)
    assert np.all(a == 0.0)
    g1, g2 = spec.gamma1, spec.gamma2
    assert -b == pytest.approx(rddot + g1 * rdot + g2 * psi1)
    u, status = hocbf_qp_control(spec, sys, np.zeros(4), t)
    assert status == ("optimal" if -b >= 0 else "infeasible")


def test_baseline_law():
    T, k = 4.0, 2.0
    sys = linear_system([[0.0]], [[1.0]])
    b = quadratic_barrier(1.0, [[1.0]])
    spec = ControllerSpec("pt_clf_baseline", b, make_schedule("linear", 3.0, T), InputSet("ball2", 100.0, 1),
                          clf_gain=k)
    x = np.array([2.0])
    # at theta = 1 the min-norm input gives dV/dt = -k V exactly
    u, status = pt_clf_baseline_control(spec, sys, x, 0.0)
    assert status == "optimal"
    step = 1e-7

    def V(z, t):
        return -b(z) / (1 - t / T) ** 2

    vdot = (V(x + step * u, step) - V(x, 0.0)) / step
    assert vdot == pytest.approx(-k * V(x, 0.0), rel=1e-5)
    # the required pre-clip input grows without bound as t -> T
    norms = [abs(pt_clf_baseline_control(spec, sys, x, t)[0][0]) for t in np.linspace(0, 3.99, 40)]
    assert all(b2 > b1 for b1, b2 in zip(norms, norms[1:]))
    with pytest.raises(DomainError):
        pt_clf_baseline_control(spec, sys, x, T)


def test_spec_validation():
    spec, sys = one_d_spec()
    with pytest.raises(ConfigurationError):
        replace(spec, alpha=0.0)
    with pytest.raises(ConfigurationError):
        replace(spec, kind="lqr")
    with pytest.raises(ConfigurationError):
        replace(spec, tube_margin=-1.0)
    with pytest.raises(ConfigurationError):
        Controller(replace(spec, input_set=InputSet("ball2", 1.0, 2)), sys)


def test_zero_system_is_constant():
    sys = linear_system(np.zeros((2, 2)), np.eye(2))
    b = quadratic_barrier(1.0, np.eye(2))
    traj = simulate(sys, lambda x, t: (np.zeros(2), "optimal"), np.array([0.3, -0.2]), 1.0, 0.1, barrier=b)
    assert len(traj) == 11
    assert all(np.array_equal(x, [0.3, -0.2]) for x in traj.states)
    assert np.allclose(np.diff(traj.t), 0.1)


def test_simulate_errors():
    sys = linear_system([[1.0]], [[1.0]])
    b = quadratic_barrier(1.0, [[1.0]])
    with pytest.raises(ConfigurationError):
        simulate(sys, lambda x, t: (np.zeros(1), "optimal"), np.ones(1), 1.0, 0.0, barrier=b)
    with pytest.raises(SimulationError), np.errstate(over="ignore", invalid="ignore"):
        simulate(sys, lambda x, t: (np.array([1e308]), "optimal"), np.ones(1), 1.0, 0.5, barrier=b)


def test_rk4_fourth_order_open_loop():
    # pendulum with a fixed input: halving dt shrinks the error by ~16
    sys = builtin("pendulum")
    u = np.array([0.3])

    def run(dt):
        x = np.array([1.0, 0.5])
        for _ in range(int(round(2.0 / dt))):
            x = rk4_step(sys, x, u, dt)
        return x

    ref = run(1e-4)
    e1, e2 = np.linalg.norm(run(0.02) - ref), np.linalg.norm(run(0.01) - ref)
    assert e2 <= 1e-4
    assert 12 <= e1 / e2 <= 20


def test_csv_layout(tmp_path):
    cfg = scenario("unicycle")
    traj = Trajectory(dt=0.1)
    traj.append(0.0, cfg.x0, [0.0, 0.0], 1.0, 2.0, "optimal", {"h_obs": 3.0})
    traj.append(0.1, cfg.x0, [0.5, 0.1], 1.5, 2.5, "infeasible", {"h_obs": 3.5})
    traj.write_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["t", "x0", "x1", "x2", "u0", "u1", "h", "tube", "status", "h_obs"]
    assert len(rows) == 3 and rows[2][8] == "infeasible"
    assert traj.infeasible_steps == [1]


def test_warm_start_identity():
    cfg = scenario("multiagent", t_end=1.0)
    hot = simulate(cfg.system(), cfg.controller(warm_start=True), cfg.x0, cfg.t_end, cfg.dt)
    cold = simulate(cfg.system(), cfg.controller(warm_start=False), cfg.x0, cfg.t_end, cfg.dt)
    assert np.array_equal(hot.X, cold.X)
    assert np.array_equal(hot.U, cold.U)
    assert hot.solver_statuses == cold.solver_statuses


def test_input_constraints_respected(runs):
    for name in ("multiagent", "hocbf_di", "multiagent_baseline"):
        cfg, traj, _, _ = runs.get(name)
        U = cfg.input_set()
        assert all(U.contains(u, tol=1e-9) for u in traj.inputs), name


def test_tube_invariance_when_feasible(runs):
    for name in ("multiagent", "hocbf_di"):
        cfg, traj, _, _ = runs.get(name)
        assert not traj.infeasible_steps
        assert min(traj.tube_values) >= -1e-3
        k_T = traj.value_at(cfg.T)
        assert traj.barrier_values[k_T] >= -1e-3


def test_hocbf_cascade_consistency(runs):
    cfg, traj, _, _ = runs.get("hocbf_di")
    spec, sys = cfg.controller_spec(), cfg.system()
    psi1 = np.array([hocbf_terms(spec, sys, x, t)[1] for x, t in zip(traj.states, traj.times)])
    lhs = np.diff(psi1) / traj.dt + spec.gamma2 * psi1[:-1]
    assert lhs.min() >= -1e-2


def test_summary_fields(runs):
    cfg, traj, _, _ = runs.get("multiagent")
    s = summarize(traj, cfg.schedule())
    assert set(s) == {"r0", "T", "h_at_T", "tube_min", "peak_input_norm", "infeasible_steps",
                      "terminal_position_norm"}
    assert 0.0 <= fraction_saturated(traj, math.sqrt(8) * 2.0) <= 1.0
