"""Exception hierarchy shared by all modules."""


class UGCEMTError(Exception):
    pass


class ConfigurationError(UGCEMTError, ValueError):
    pass


class ShapeError(UGCEMTError, ValueError):
    pass


class DataError(UGCEMTError, ValueError):
    pass


class FormatError(UGCEMTError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(UGCEMTError, ArithmeticError):
    pass


class StateError(UGCEMTError, RuntimeError):
    pass


class MetricUndefinedError(UGCEMTError, ValueError):
    """Raised when a surface metric is requested for an empty mask."""
