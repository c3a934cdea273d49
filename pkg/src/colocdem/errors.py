class ColocError(Exception):
    """Base class for all errors raised by colocdem."""


class InvalidArgument(ColocError, ValueError):
    pass


class FormatError(ColocError, ValueError):
    pass


class ConfigError(ColocError, ValueError):
    pass


class ContactError(ColocError):
    pass


class PorosityError(ColocError, ValueError):
    pass


class NumericError(ColocError, FloatingPointError):
    pass


class TimestepError(ColocError):
    pass


class SolverError(ColocError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class ProjectionError(ColocError):
    pass


class InterpolationError(ColocError):
    pass


class TopologyError(ColocError):
    pass


class WorkerError(ColocError):
    def __init__(self, rank, cause):
        super().__init__(f"rank {rank} failed: {cause!r}")
        self.rank = rank
        self.cause = cause
