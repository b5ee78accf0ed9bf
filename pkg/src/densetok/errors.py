"""Exception hierarchy for densetok.

The CLI maps each family to an exit code.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class DenseTokError(Exception):
    """Base class for every error densetok raises on purpose."""

    exit_code = EXIT_DATA


class ShapeError(DenseTokError, ValueError):
    """Operand shapes violate an operation's contract."""

    exit_code = EXIT_DATA


class ConfigError(DenseTokError):
    """A configuration value is missing, malformed or inconsistent."""

    exit_code = EXIT_USAGE


class DataError(DenseTokError):
    """Input files (images, annotations, manifests, checkpoints) are unusable."""

    exit_code = EXIT_DATA


class NumericError(DenseTokError):
    """Non-finite values or a failed gradient check."""

    exit_code = EXIT_NUMERIC
