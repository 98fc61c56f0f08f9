"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code so scripted callers can distinguish
user error from data problems from numerical blow-ups.
"""


class FewsegError(Exception):
    """Base class; exit code 1 unless a subclass says otherwise."""

    exit_code = 1


class ConfigError(FewsegError):
    """Bad configuration or arguments (exit code 2)."""

    exit_code = 2


class DataError(FewsegError):
    """Unusable or exhausted input data (exit code 3)."""

    exit_code = 3


class NumericalError(FewsegError):
    """Non-finite loss or other numerical failure (exit code 4)."""

    exit_code = 4


class SelectionExhaustedError(DataError):
    """No superpixel segment satisfies the minimum-size filter."""


class EpisodeConstructionError(DataError):
    """Transform resampling could not keep any query foreground."""


class EpisodeSkipError(DataError):
    """Episode unusable (e.g. empty support foreground); caller may resample."""
