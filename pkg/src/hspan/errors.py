"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class HSPanError(Exception):
    exit_code = 1


class DimensionMismatchError(HSPanError, ValueError):
    exit_code = 3

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class NonFiniteError(HSPanError, ValueError):
    exit_code = 4

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ContainerError(HSPanError):
    exit_code = 5


class CorruptHeaderError(ContainerError):
    pass


class PayloadSizeMismatchError(ContainerError):
    pass


class UnsupportedDtypeError(ContainerError):
    pass


class ParameterError(HSPanError, ValueError):
    """Invalid argument value (kernel size, band count, method name, ...)."""

    exit_code = 6


class MetricDomainError(HSPanError, ValueError):
    """A metric is undefined for the given inputs (constant band, zero mean, ...)."""

    exit_code = 7


class NumericalError(HSPanError, FloatingPointError):
    """NaN encountered during optimization or training."""

    exit_code = 8


class MissingArtifactError(HSPanError):
    exit_code = 9


class ConfigHashMismatchError(HSPanError):
    exit_code = 10
