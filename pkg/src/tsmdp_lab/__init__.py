"""Thompson sampling for parameterised MDPs, a UCRL2 baseline, and the KL
geometry behind the log-T regret constant."""

from .errors import (
    CapacityError,
    ConfigurationError,
    InfiniteConstantError,
    NumericalError,
    PreconditionError,
    SimulationError,
    TsmdpError,
    ValidationError,
)

__all__ = [
    "CapacityError",
    "ConfigurationError",
    "InfiniteConstantError",
    "NumericalError",
    "PreconditionError",
    "SimulationError",
    "TsmdpError",
    "ValidationError",
]
