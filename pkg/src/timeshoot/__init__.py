"""Time-parallel multiple-shooting ODE solves with differentiable gradients."""

from .errors import (
    ConfigError,
    NumericalBlowup,
    SizeGuardError,
    StaleSolutionError,
    StiffnessFailure,
    TimeshootError,
)
from .ledger import NfeLedger
from .odecore import (
    SolverSpec,
    TimeGrid,
    Trajectory,
    WorkerPool,
    integrate,
    integrate_batch,
    step_fixed,
)

__all__ = [
    "ConfigError",
    "NumericalBlowup",
    "SizeGuardError",
    "StaleSolutionError",
    "StiffnessFailure",
    "TimeshootError",
    "NfeLedger",
    "SolverSpec",
    "TimeGrid",
    "Trajectory",
    "WorkerPool",
    "integrate",
    "integrate_batch",
    "step_fixed",
]

__version__ = "0.1.0"
