class SchemaError(ValueError):
    """Input file is missing a required column."""


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    """Bad command-line usage, or an API called out of order (e.g. backward with a stale cache)."""


class ConfigurationError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "configuration error"


class RankError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ImputationError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, last_value: float | None = None) -> None:
        super().__init__(message)
        self.last_value = last_value


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None) -> None:
        super().__init__(message)
        self.epoch = epoch


class UndefinedMetricError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class JoinError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "join error"


# Exit codes used by the command handlers
DATA_ERRORS = (SchemaError, ShapeError, RankError, DegenerateInputError, ImputationError,
               ConvergenceError, TrainingError, UndefinedMetricError, InsufficientDataError,
               JoinError, FileNotFoundError)
USAGE_ERRORS = (UsageError, ConfigurationError, ParameterError)
