"""Exception hierarchy shared by every module of the package."""


class QaaError(Exception):
    """Base class; the CLI maps subclasses to exit codes via ``code``."""

    code = "error"


class DimensionError(QaaError, ValueError):
    code = "dimension"


class ConfigError(QaaError, ValueError):
    code = "config"


class StateError(QaaError, RuntimeError):
    code = "state"


class DegenerateDescriptorError(QaaError, ValueError):
    code = "degenerate_descriptor"


class NumericError(QaaError, ArithmeticError):
    code = "numeric"


class DataError(QaaError, ValueError):
    code = "data"


class CapacityError(QaaError, ValueError):
    code = "capacity"


class CriterionError(QaaError, ValueError):
    code = "criterion"


class FormatError(QaaError, ValueError):
    code = "format"


class TrainingError(QaaError, RuntimeError):
    code = "training"

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
