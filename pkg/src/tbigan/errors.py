"""Exception hierarchy. The CLI maps each family to an exit code."""


class TBiGanError(Exception):
    exit_code = 1


class ConfigError(TBiGanError, ValueError):
    """Invalid configuration or usage (exit code 1)."""

    exit_code = 1


class ContractError(TBiGanError, ValueError):
    """A caller broke an operation's precondition."""

    exit_code = 1


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class DataError(TBiGanError, ValueError):
    """Input data is malformed or unusable (exit code 2)."""

    exit_code = 2


class UndefinedMetricError(DataError):
    """A metric is undefined for the supplied labels (e.g. one class only)."""


class NumericalError(TBiGanError, ArithmeticError):
    """Numerical failure such as NaN losses (exit code 3)."""

    exit_code = 3


class NonFiniteError(NumericalError):
    """A tensor or gradient contains NaN or Inf."""


class TrainingDivergedError(NumericalError):
    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class ScoringError(NumericalError):
    def __init__(self, message: str, window_index: int | None = None):
        super().__init__(message)
        self.window_index = window_index
