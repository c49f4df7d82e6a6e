"""Exception hierarchy shared by the toolkit.

The CLI maps each family onto a process exit code.
"""


class CvunetError(Exception):
    exit_code = 1


class ConfigurationError(CvunetError, ValueError):
    """Inconsistent shapes, hyperparameters or config files."""

    exit_code = 1


class UsageError(CvunetError, ValueError):
    """A function was called with arguments outside its contract."""

    exit_code = 1


class DataError(CvunetError):
    """Unreadable, missing or malformed audio / manifest data."""

    exit_code = 2


class WavFormatError(DataError):
    pass


class NumericalError(CvunetError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    exit_code = 3
