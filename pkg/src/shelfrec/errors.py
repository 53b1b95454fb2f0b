"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ValidationError`` subclasses exit with
2, ``IOFailure`` with 3 and ``UndefinedMetricError`` with 4.
"""


class ShelfRecError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ShelfRecError, ValueError):
    """Input violates a documented precondition."""


class DimensionError(ValidationError):
    pass


class DegenerateInputError(ValidationError):
    pass


class StateError(ShelfRecError, RuntimeError):
    """Backward pass called with a missing or mismatched forward cache."""


class InsufficientDataError(ValidationError):
    pass


class TrainingError(ShelfRecError, RuntimeError):
    pass


class ConflictError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class NoCandidatesError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValidationError):
    pass


class VersionError(ValidationError):
    pass


class IOFailure(ShelfRecError, OSError):
    pass


class FormatError(IOFailure):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UndefinedMetricError(ShelfRecError, ArithmeticError):
    pass
