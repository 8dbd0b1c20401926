"""Exception hierarchy shared across the package."""


class CtubeError(Exception):
    """Base class for all library errors."""


class ConfigurationError(CtubeError, ValueError):
    """Invalid parameters for a system, barrier, schedule or scenario."""


class ContractViolation(CtubeError, ValueError):
    """A caller broke a documented precondition (dimensions, missing data)."""


class CertificateError(CtubeError):
    """Feasibility certificate could not be computed."""


class NumericalFailure(CtubeError):
    """An iterative solver hit its iteration cap or lost accuracy."""


class SimulationError(CtubeError):
    """Closed-loop simulation produced a non-finite state."""


class DomainError(CtubeError):
    """Controller evaluated outside the time window where it is defined."""
