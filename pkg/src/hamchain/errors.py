class ConfigurationError(ValueError):
    """Bad dimensions, empty samples, or inconsistent parameters."""


class IntegrationBlowup(ArithmeticError):
    """The integrator produced a non-finite state."""


class NoHitError(RuntimeError):
    """A trajectory never entered the requested set."""


class ExpertFailure(RuntimeError):
    """The expert planner hit its episode cap without reaching the target."""
