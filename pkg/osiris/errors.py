class OsirisError(Exception):
    """Base class for every simulator failure."""


class ParameterError(OsirisError):
    pass


class BasisMismatchError(OsirisError):
    pass


class RepresentationError(OsirisError):
    pass


class EncodingError(OsirisError):
    pass


class LevelMismatchError(OsirisError):
    pass


class MissingKeyError(OsirisError):
    pass


class RoutingError(OsirisError):
    pass


class SimulationError(OsirisError):
    pass


class ScheduleError(OsirisError):
    def __init__(self, message: str, suggested_n2: int | None = None):
        super().__init__(message)
        self.suggested_n2 = suggested_n2


class WorkloadError(OsirisError):
    pass


class PerfModelError(OsirisError):
    pass
