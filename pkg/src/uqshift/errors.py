"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class UQError(Exception):
    exit_code = 1


class ValidationError(UQError, ValueError):
    exit_code = 1


class DimensionError(ValidationError):
    pass


class ConfigError(UQError):
    exit_code = 1


class UsageError(UQError):
    exit_code = 1


class NumericalError(UQError):
    """Non-finite values or a tolerance failure during a numerical run."""

    exit_code = 2

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class TrainingError(NumericalError):
    pass


class EmptyResultError(UQError):
    exit_code = 1


class PathError(UQError, OSError):
    exit_code = 3


class TensorFormatError(UQError):
    exit_code = 3


class MagicMismatchError(TensorFormatError):
    pass


class TruncationError(TensorFormatError):
    pass


class DimOverflowError(TensorFormatError):
    pass
