from typing import Any


class MechanismError(ValueError):
    """Base class for every domain error raised by sp_mechanisms"""


class InvalidInputError(MechanismError):
    """Input rejected: bad normalisation, dimension mismatch, or out-of-domain value"""


class CouplingError(InvalidInputError):
    """
    The pair (f1, f2) breaks t * f1'(t) = (1 - t) * f2'(1 - t)

    Attributes:
        worst_point: (float) grid point with the largest residual
        residual: (float) size of that residual
    """

    def __init__(self, worst_point: float, residual: float) -> None:
        super().__init__(
            f"coupling violated at t={worst_point:.6g} (residual {residual:.3e})"
        )
        self.worst_point = worst_point
        self.residual = residual


class InfeasibleAllocationError(MechanismError):
    """A share matrix has negative shares or hands out more than one unit of an item"""


class ScheduleError(MechanismError):
    """Malformed price schedule: decreasing, negative, or with crossed breakpoints"""


class ConfigError(MechanismError):
    """Run configuration could not be parsed or validated"""


class SolverError(RuntimeError):
    """The LP backend failed or returned a status we do not handle"""


class LPVerificationError(SolverError):
    """
    An optimum reported by the backend failed the independent row re-check

    Attributes:
        row_name: (str) the row with the largest violation
        violation: (float) how far the row is from being satisfied
    """

    def __init__(self, row_name: str, violation: float) -> None:
        super().__init__(f"row {row_name} violated by {violation:.3e}")
        self.row_name = row_name
        self.violation = violation


class LPStatusError(SolverError):
    """A non-optimal LP solution was handed to a consumer that needs an optimum"""

    def __init__(self, status: Any) -> None:
        super().__init__(f"expected an optimal solution, got status {status}")
        self.status = status
