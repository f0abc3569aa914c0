"""Exception hierarchy shared by every pipeline stage.

The CLI maps these onto exit codes: configuration problems exit with 2,
data problems with 3 and numerical failures with 4.
"""


class GateBiasError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(GateBiasError, ValueError):
    """A configuration value is missing, mistyped or out of bounds."""

    exit_code = 2


class DataError(GateBiasError, ValueError):
    """Input data is malformed, inconsistent or insufficient."""

    exit_code = 3


class FormatError(DataError):
    """A binary artifact has the wrong magic, version or is truncated."""


class NumericError(GateBiasError, ArithmeticError):
    """A numerical routine diverged or produced non-finite values."""

    exit_code = 4
