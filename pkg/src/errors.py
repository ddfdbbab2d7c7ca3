"""Exception hierarchy. Every error carries the exit code the CLI reports."""


class DartError(Exception):
    exit_code = 2


class ConfigError(DartError):
    """Bad configuration values or command usage."""

    exit_code = 1


class DataError(DartError):
    exit_code = 2


class DimensionError(DataError, ValueError):
    pass


class InputValidationError(DataError, ValueError):
    pass


class IngestionError(DataError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RetrievalError(DataError):
    pass


class CheckpointError(DataError):
    pass


class InvariantViolation(DartError):
    exit_code = 3


class NonFiniteGradientError(InvariantViolation):
    pass
