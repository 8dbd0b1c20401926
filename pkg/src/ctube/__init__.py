"""Constricting control barrier functions: prescribed-time recovery into a
safe set under input limits, with design-time feasibility certificates."""

from .barrier import Barrier, lie_derivatives, obstacle_barrier, quadratic_barrier, second_order_terms
from .certificate import (
    FeasibilityCertificate,
    InputSet,
    barrier_authority,
    local_feasibility,
    sigma_min_linear_closed_form,
    sigma_min_sampled,
    support_function,
    t_min,
)
from .control import Controller, ControllerSpec, Trajectory, simulate, summarize
from .dynamics import ControlAffineSystem, builtin, linear_system
from .errors import (
    CertificateError,
    ConfigurationError,
    ContractViolation,
    CtubeError,
    DomainError,
    NumericalFailure,
    SimulationError,
)
from .qpsolve import QpProblem, QpSolution, solve_min_norm_ball, solve_qp
from .schedule import ConstrictionSchedule, initial_relaxation, make_schedule, tube_value, verify_definition1

__version__ = "0.1.0"
