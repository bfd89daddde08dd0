"""Exception hierarchy shared across the package."""


class DglrError(Exception):
    """Base class for all package-specific errors."""


class DataError(DglrError):
    """Malformed input files or datasets that violate the schema contract."""


class DimensionError(DglrError):
    """Incompatible shapes between datasets, parameters, or checkpoints."""


class NumericError(DglrError):
    """Non-finite values encountered during computation."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    Carries the last parameter snapshot with a finite loss so callers can
    persist partial results.
    """

    def __init__(self, message, last_good=None, epoch=None, log=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch
        self.log = list(log) if log is not None else []
