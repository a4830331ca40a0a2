"""Exception types shared across the package."""


class MovactError(Exception):
    pass


class GeometryError(MovactError, ValueError):
    """Actuator window leaves the domain (or touches it where forbidden)."""


class ConfigError(MovactError, ValueError):
    pass


class PreconditionError(MovactError, ValueError):
    pass


class StabilizationError(MovactError, RuntimeError):
    """Closed loop shows no decay; try more actuators or a larger lambda."""


class ConvergenceError(MovactError, RuntimeError):
    pass


class OptimizerError(MovactError, RuntimeError):
    pass


class PipelineError(MovactError, RuntimeError):
    def __init__(self, msg, interval=None):
        super().__init__(msg)
        self.interval = interval
