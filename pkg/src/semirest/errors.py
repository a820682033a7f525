"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems 3 and numerical failures 4.
"""


class SemirestError(Exception):
    exit_code = 1


class ConfigError(SemirestError, ValueError):
    exit_code = 2


class DataError(SemirestError):
    exit_code = 3


class DecodeError(DataError):
    """Base class for malformed binary containers."""


class MagicMismatchError(DecodeError):
    pass


class HeaderError(DecodeError):
    pass


class TruncatedPayloadError(DecodeError):
    pass


class UndefinedMetricError(DataError, ValueError):
    pass


class NumericalError(SemirestError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class StateError(SemirestError, RuntimeError):
    pass
