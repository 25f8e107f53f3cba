"""Exception hierarchy shared across the package."""


class FedSimError(Exception):
    """Base class for all errors raised by fedsim."""


class StructuralError(FedSimError, ValueError):
    """Shapes or layouts do not line up."""


class DomainError(FedSimError, ValueError):
    """An argument is outside the set of values the operation accepts."""


class ConfigError(FedSimError, ValueError):
    """Invalid experiment or strategy configuration."""


class DivergenceError(FedSimError, FloatingPointError):
    """A computation produced NaN or Inf."""

    def __init__(self, message: str, round: int | None = None):
        self.round = round
        if round is not None:
            message = f"round {round}: {message}"
        super().__init__(message)


class DataError(FedSimError, ValueError):
    """Input data could not be parsed."""

    def __init__(self, message: str, row: int | None = None, column: int | str | None = None):
        self.row = row
        self.column = column
        if row is not None or column is not None:
            message = f"{message} (row {row}, column {column})"
        super().__init__(message)
