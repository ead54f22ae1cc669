"""Exception hierarchy shared by every vgib module.

The command-line handlers in ``app.py`` map these families to exit codes:
validation problems exit with 2, failed checks with 1.
"""

from typing import Optional


class VGIBError(Exception):
    """Base class for all errors raised by vgib."""


class ShapeError(VGIBError, ValueError):
    """Operands of a numerical primitive have incompatible shapes."""


class DomainError(VGIBError, ValueError):
    """A primitive was called outside its mathematical domain."""


class DatasetError(VGIBError, ValueError):
    """A dataset file or an in-memory graph failed validation."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")


class ConfigError(VGIBError, ValueError):
    """Hyperparameters or command-line values are invalid."""


class CheckpointError(VGIBError, ValueError):
    """A checkpoint document could not be read or applied."""


class ArchitectureMismatchError(CheckpointError):
    """A checkpoint does not fit the model or dataset it is used with."""


class NonFiniteError(VGIBError, ArithmeticError):
    """A loss term or gradient became NaN or infinite."""

    def __init__(self, message: str, epoch: Optional[int] = None, term: Optional[str] = None):
        self.epoch = epoch
        self.term = term
        super().__init__(message)


class InvalidTableError(VGIBError, ValueError):
    """A joint probability table violates its construction invariants."""


class EvaluationError(VGIBError, ValueError):
    """An explanation metric is undefined for the given inputs."""
