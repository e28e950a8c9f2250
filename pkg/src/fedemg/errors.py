"""Exception types raised across the package."""


class FedEMGError(Exception):
    """Base class for all package errors."""


class ConfigError(FedEMGError, ValueError):
    pass


class FormatError(FedEMGError, ValueError):
    """Malformed session or snapshot file.

    ``line`` is 1-based; ``field`` is a column or manifest key when known.
    """

    def __init__(self, message, path=None, line=None, field=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        super().__init__(f"{': '.join([', '.join(loc), message]) if loc else message}")
        self.path = path
        self.line = line
        self.field = field


class InputTooShortError(FedEMGError, ValueError):
    pass


class SegmentationError(FedEMGError, ValueError):
    pass


class DimensionError(FedEMGError, ValueError):
    pass


class NumericError(FedEMGError, ArithmeticError):
    pass


class SingularSystemError(NumericError):
    pass


class StepSizeError(NumericError):
    """Gradient iterations diverged; the step size is too large."""


class InsufficientDataError(FedEMGError, ValueError):
    pass


class TrialAborted(NumericError):
    pass
