"""Exception hierarchy shared by every umate module.

The CLI maps these onto process exit codes (see ``umate.cli``).
"""


class UmateError(Exception):
    exit_code = 1


class ContractViolation(UmateError, ValueError):
    """A caller broke a documented precondition (shapes, ranges, sizes)."""

    exit_code = 2


class MetricInapplicable(ContractViolation):
    """A metric needs more structure than the input has (e.g. fewer than 8 nodes)."""


class CapacityError(ContractViolation):
    """Input exceeds what a trained model was sized for."""


class NumericError(UmateError, ArithmeticError):
    exit_code = 3


class FormatError(UmateError):
    """Malformed file; ``position`` is a line number or record index when known."""

    exit_code = 4

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)
        self.position = position


class VersionError(FormatError):
    pass
