"""Exception hierarchy shared by the library and the command line.

Each class carries the process exit code the CLI reports for it.
"""


class HvaeError(Exception):
    """Base class for every error raised by hvae_joint."""
    exit_code = 1


class ConfigError(HvaeError, ValueError):
    """Invalid configuration value, unknown key or bad CLI flag."""
    exit_code = 2


class ShapeError(HvaeError, ValueError):
    """Tensor or block shape contract violated."""
    exit_code = 2


class DataError(HvaeError, ValueError):
    """Dataset content is missing, unpaired, or not in the expected range."""
    exit_code = 3


class NumericalError(HvaeError, ArithmeticError):
    """A non-finite value reached an operation boundary."""
    exit_code = 4


class GraphError(HvaeError, RuntimeError):
    """Misuse of a computation record (non-scalar output, reuse after backward)."""
    exit_code = 1


class StorageError(HvaeError, OSError):
    """Reading or writing an artifact failed."""
    exit_code = 5
