import math

import numpy as np
import pytest

from ctube.barrier import lie_derivatives, obstacle_barrier, quadratic_barrier, second_order_terms
from ctube.dynamics import AGENT_A, AGENT_B, builtin, eval_vector_field, linear_system
from ctube.errors import ConfigurationError, ContractViolation


def fd_grad(fn, x, step=1e-6):
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return out


def di_barrier():
    return quadratic_barrier(0.25, np.diag([1.0, 1.0, 0.0, 0.0]))


def test_quadratic_values():
    assert quadratic_barrier(0.5, np.eye(16))(np.zeros(16)) == 0.5
    assert di_barrier()(np.array([3, 2, -0.3, -0.1])) == pytest.approx(-12.75)
    v = np.array([0.6, 0.8, 0.0])
    assert quadratic_barrier(1.0, np.eye(3))(v) == pytest.approx(0.0, abs=1e-15)


def test_quadratic_hessian_constant():
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    b = quadratic_barrier(1.0, P)
    assert np.array_equal(b.hessian(np.array([3.0, -1.0])), -2 * P)


def test_quadratic_rejects_bad_p():
    with pytest.raises(ConfigurationError):
        quadratic_barrier(1.0, np.diag([1.0, -1.0]))
    with pytest.raises(ConfigurationError):
        quadratic_barrier(1.0, np.array([[1.0, 0.3], [0.0, 1.0]]))
    with pytest.raises(ConfigurationError):
        quadratic_barrier(0.0, np.eye(2))


def test_obstacle_values():
    b = obstacle_barrier((2.0, 1.5), 0.6, state_dim=3)
    assert b(np.array([4.0, 3.0, 0.0])) == pytest.approx(5.89)
    assert b(np.array([2.0, 1.5, 1.0])) == pytest.approx(-0.36)
    on_circle = np.array([2.0 + 0.6 * math.cos(1.1), 1.5 + 0.6 * math.sin(1.1), 0.0])
    assert b(on_circle) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ConfigurationError):
        obstacle_barrier((0, 0), 0.0)


def test_pendulum_lie_derivatives():
    b = quadratic_barrier(0.01, np.eye(2), center=[math.pi, 0.0])
    lie = lie_derivatives(b, builtin("pendulum"), np.array([math.pi, 1.0]))
    assert lie.lf_h == pytest.approx(0.0, abs=1e-12)
    assert lie.lg_h == pytest.approx([-2.0])


def test_linear_lie_formula():
    rng = np.random.default_rng(0)
    P = np.array([[1.5, 0.2], [0.2, 0.7]])
    b = quadratic_barrier(0.5, P)
    sys = linear_system(AGENT_A, AGENT_B)
    for _ in range(20):
        x = rng.standard_normal(2)
        lie = lie_derivatives(b, sys, x)
        assert lie.lf_h == pytest.approx(-2 * x @ P @ AGENT_A @ x)
        assert lie.lg_h == pytest.approx(-2 * x @ P @ AGENT_B)


def test_critical_point_zero_drift():
    b = quadratic_barrier(1.0, np.eye(3))
    lie = lie_derivatives(b, builtin("unicycle"), np.zeros(3))
    assert lie.lf_h == 0.0 and np.all(lie.lg_h == 0.0)


def test_second_order_formulas():
    sys, b = builtin("double_integrator"), di_barrier()
    lf2, lglf = second_order_terms(b, sys, np.array([3, 2, -0.3, -0.1]))
    assert lf2 == pytest.approx(-0.2)
    assert lglf == pytest.approx([-6.0, -4.0])
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal(4)
        lf2, lglf = second_order_terms(b, sys, x)
        assert lf2 == pytest.approx(-2 * x[2:] @ x[2:])
        assert lglf == pytest.approx(-2 * x[:2])
    _, lglf = second_order_terms(b, sys, np.array([0, 0, 1.0, -2.0]))
    assert np.all(lglf == 0.0)


def test_second_order_matches_flow_derivative():
    # d/dt L_f h along the flow equals lf2 + lglf u
    sys, b = builtin("double_integrator"), di_barrier()
    x = np.array([1.0, -0.5, 0.3, 0.8])
    u = np.array([0.4, -1.1])

    def lf(z):
        return lie_derivatives(b, sys, z).lf_h

    step = 1e-6
    xdot = eval_vector_field(sys, x, u)
    fd = (lf(x + step * xdot) - lf(x - step * xdot)) / (2 * step)
    lf2, lglf = second_order_terms(b, sys, x)
    assert fd == pytest.approx(lf2 + lglf @ u, rel=1e-6)


def test_second_order_needs_hessian():
    b = quadratic_barrier(1.0, np.eye(4))
    bare = type(b)(value=b.value, gradient=b.gradient)
    with pytest.raises(ContractViolation):
        second_order_terms(bare, builtin("double_integrator"), np.zeros(4))


BARRIERS = {
    "multiagent": (builtin("multiagent"), quadratic_barrier(0.5, np.eye(16))),
    "pendulum": (builtin("pendulum"), quadratic_barrier(0.01, np.eye(2), center=[math.pi, 0.0])),
    "double_integrator": (builtin("double_integrator"), di_barrier()),
    "unicycle": (builtin("unicycle"), quadratic_barrier(0.25, np.diag([1.0, 1.0, 0.0]))),
    "obstacle": (builtin("unicycle"), obstacle_barrier((2.0, 1.5), 0.6, state_dim=3)),
}


@pytest.mark.parametrize("name", sorted(BARRIERS))
def test_gradient_finite_differences(name):
    sys, b = BARRIERS[name]
    rng = np.random.default_rng(11)
    for _ in range(100):
        x = rng.uniform(-4, 4, sys.state_dim)
        exact = b.grad(x)
        err = np.abs(fd_grad(b, x) - exact).max() / max(1.0, np.abs(exact).max())
        assert err <= 1e-5


@pytest.mark.parametrize("name", sorted(BARRIERS))
def test_lie_derivatives_along_flow(name):
    sys, b = BARRIERS[name]
    rng = np.random.default_rng(5)
    step = 1e-6
    for _ in range(100):
        x = rng.uniform(-3, 3, sys.state_dim)
        u = rng.uniform(-2, 2, sys.input_dim)
        xdot = eval_vector_field(sys, x, u)
        fd = (b(x + step * xdot) - b(x)) / step
        lie = lie_derivatives(b, sys, x)
        exact = lie.lf_h + lie.lg_h @ u
        assert abs(fd - exact) <= 1e-4 * max(1.0, abs(exact))


def test_relative_degree_structure():
    sys, b = BARRIERS["double_integrator"]
    _, reach = BARRIERS["unicycle"]
    rng = np.random.default_rng(2)
    for _ in range(50):
        assert np.all(lie_derivatives(b, sys, rng.standard_normal(4)).lg_h == 0.0)
        lg = lie_derivatives(reach, builtin("unicycle"), rng.standard_normal(3)).lg_h
        assert lg[1] == 0.0
