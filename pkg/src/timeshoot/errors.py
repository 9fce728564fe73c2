"""Exception types shared across the package."""


class TimeshootError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TimeshootError):
    """Invalid configuration: bad dimensions, malformed files, bad enums."""


class NumericalBlowup(TimeshootError):
    """Non-finite state encountered during integration.

    Carries the time at which the offending value appeared.
    """

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class StiffnessFailure(TimeshootError):
    """Adaptive step size underflowed; the problem is likely stiff."""


class SizeGuardError(TimeshootError):
    """A dense assembly would exceed the configured size guard."""


class StaleSolutionError(TimeshootError):
    """A gradient or warm start was requested from an unconverged state."""
