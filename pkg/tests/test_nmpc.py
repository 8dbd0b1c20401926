import math
from dataclasses import replace

import numpy as np
import pytest

from ctube.barrier import obstacle_barrier
from ctube.errors import ConfigurationError
from ctube.nmpc import PlanResult, cold_start, plan, receding_horizon_run, rollout, shift

from .conftest import scenario


@pytest.fixture(scope="module")
def problem():
    return scenario("unicycle").nmpc_problem()


def test_problem_validation(problem):
    with pytest.raises(ConfigurationError):
        replace(problem, horizon=0.05)
    with pytest.raises(ConfigurationError):
        replace(problem, beta=-1.0)
    with pytest.raises(ConfigurationError):
        replace(problem, horizon=0.07)  # rounds to one knot
    assert problem.steps == 30


def test_straight_rollout_hits_obstacle(problem):
    x0 = scenario("unicycle").x0
    U = np.tile([problem.v_max, 0.0], (problem.steps, 1))
    X, _ = rollout(problem, x0, U)
    h_obs = [problem.obstacle(x) for x in X]
    assert min(h_obs) < 0


def test_first_plan_detours(problem):
    x0 = scenario("unicycle").x0
    res = plan(problem, x0, 0.0)
    assert res.converged and res.constraint_violation <= 1e-6
    assert min(problem.obstacle(x) for x in res.predicted_states[1:]) >= problem.obstacle_margin - 1e-6
    # the predicted path leaves the straight line to the origin
    line = x0[:2] / np.linalg.norm(x0[:2])
    lateral = [abs(line[0] * x[1] - line[1] * x[0]) for x in res.predicted_states]
    assert max(lateral) > 0.05


def test_rollout_exactness(problem):
    x0 = scenario("unicycle").x0
    res = plan(problem, x0, 0.0)
    X, _ = rollout(problem, x0, res.input_sequence)
    assert np.array_equal(res.predicted_states[0], x0)
    assert np.abs(X - res.predicted_states).max() <= 1e-12


def test_rollout_sensitivities_match_finite_differences(problem):
    rng = np.random.default_rng(0)
    x0 = np.array([1.0, -0.5, 0.3])
    U = rng.uniform(-1, 1, (problem.steps, 2))
    X, S = rollout(problem, x0, U, sensitivities=True)
    step = 1e-6
    for j in (0, 7, 31, 59):
        dU = np.zeros(U.size)
        dU[j] = step
        Xp, _ = rollout(problem, x0, U + dU.reshape(U.shape))
        Xm, _ = rollout(problem, x0, U - dU.reshape(U.shape))
        fd = (Xp - Xm) / (2 * step)
        assert np.abs(fd - S[:, :, j]).max() <= 1e-6


def test_straight_plan_without_obstacle(problem):
    free = replace(problem, obstacle=None)
    x = np.array([3.0, 0.0, math.pi])
    res = plan(free, x, 0.0)
    assert res.converged
    assert np.abs(res.input_sequence[:, 1]).max() <= 1e-2


def test_zero_terminal_weight_gives_zero_input(problem):
    free = replace(problem, obstacle=None, beta=0.0)
    res = plan(free, np.array([3.0, 2.0, 0.4]), 0.0)
    assert res.converged
    assert np.abs(res.input_sequence).max() <= 1e-6


def test_warm_start_helpers(problem):
    U = cold_start(problem)
    assert U.shape == (30, 2) and np.all(U[:, 0] == 0) and np.all(U[:, 1] == problem.cold_start_omega)
    prev = PlanResult(np.arange(60.0).reshape(30, 2), np.zeros((31, 3)), 0.0, 1, True, 0.0)
    shifted = shift(prev)
    assert np.array_equal(shifted[:-1], prev.input_sequence[1:])
    assert np.array_equal(shifted[-1], prev.input_sequence[-1])


def test_plan_time_limit(problem):
    with pytest.raises(ConfigurationError):
        plan(problem, np.zeros(3), problem.schedule.T + problem.horizon + 1.0)


def test_run_validation(problem):
    with pytest.raises(ConfigurationError):
        receding_horizon_run(problem, np.zeros(3), 1.0, sim_dt=0.1)
    with pytest.raises(ConfigurationError):
        receding_horizon_run(problem, np.zeros(3), 1.0, sim_dt=0.005, replan_every=20)


def test_far_obstacle_monotone_approach(problem):
    far = replace(problem, obstacle=obstacle_barrier((50.0, 50.0), 0.6, state_dim=3, label="h_obs"))
    res = receding_horizon_run(far, scenario("unicycle").x0, 20.0)
    traj = res.trajectory
    dist = np.linalg.norm(traj.X[:, :2], axis=1)
    after = dist[traj.t >= 1.0]
    assert np.all(np.diff(after) <= 1e-9)
    entered = np.nonzero(dist <= 0.5)[0]
    assert entered.size and traj.times[entered[0]] < far.schedule.T


def test_closed_loop_tube_slack(runs):
    _, traj, _, _ = runs.get("unicycle")
    assert min(traj.aux_barriers["h_obs"]) >= 0
    assert min(traj.tube_values) >= -0.05


def test_warm_start_neutrality(runs):
    cfg, warm, _, _ = runs.get("unicycle")
    cold = receding_horizon_run(cfg.nmpc_problem(), cfg.x0, cfg.t_end, sim_dt=cfg.dt,
                                replan_every=cfg.nmpc["replan_every"], warm_start=False).trajectory
    k = warm.value_at(cfg.T)
    assert np.linalg.norm(warm.states[k][:2] - cold.states[k][:2]) <= 0.05
