"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto process exit codes:
    ParameterError -> 1 (usage / bad configuration)
    DataError      -> 2 (unreadable or inconsistent data)
    NumericalError -> 3 (divergence, non-finite values)
"""


class DpiError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(DpiError, ValueError):
    """A precondition on arguments or configuration was violated."""


class DataError(DpiError):
    """Input data is missing, unreadable, or internally inconsistent."""


class NumericalError(DpiError):
    """A computation produced non-finite values or diverged."""
