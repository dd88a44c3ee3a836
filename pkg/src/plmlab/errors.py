"""Exception types shared across the package."""


class PlmError(Exception):
    """Base class for every error raised by plmlab."""


class DimensionError(PlmError, ValueError):
    pass


class DomainError(PlmError, ValueError):
    pass


class NumericError(PlmError, ArithmeticError):
    pass


class UsageError(PlmError, RuntimeError):
    pass


class ConfigurationError(PlmError, ValueError):
    pass


class FormatError(PlmError, ValueError):
    pass


class TrainingError(PlmError, RuntimeError):
    """A training stage diverged or failed.

    ``stage`` names the pipeline stage and ``epoch`` the epoch index (when known).
    """

    def __init__(self, message, stage=None, epoch=None):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch


class EvaluationError(PlmError, RuntimeError):
    pass


class ComparisonError(PlmError, ValueError):
    pass
