"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit status the CLI reports for it.
"""


class TsmdpError(Exception):
    exit_code = 1


class ConfigurationError(TsmdpError, ValueError):
    """Malformed input: shapes, ranges, unknown keys, oversize grids."""

    exit_code = 2


class PreconditionError(TsmdpError, ValueError):
    """Input is well formed but violates a modelling assumption
    (e.g. a transient start state, or several closed classes)."""

    exit_code = 2


class ValidationError(PreconditionError):
    """A user supplied certificate does not hold."""


class CapacityError(ConfigurationError):
    pass


class NumericalError(TsmdpError, ArithmeticError):
    """An iterative method failed to reach its tolerance."""

    exit_code = 3

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SimulationError(TsmdpError, RuntimeError):
    exit_code = 3


class InfiniteConstantError(TsmdpError, ArithmeticError):
    """The regret-constant optimisation is unbounded (a suboptimal
    parameter cannot be told apart from the truth by its own policy)."""

    exit_code = 4
