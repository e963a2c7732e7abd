"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: usage problems exit 2, malformed
or inconsistent data exits 3, numerical failures exit 4, I/O failures
exit 5 (plain ``OSError`` covers the last).
"""


class CounterClrError(Exception):
    """Base class for all package-specific errors."""


class ArgumentError(CounterClrError, ValueError):
    """A caller-supplied argument violates a documented precondition."""


class DataFormatError(CounterClrError):
    """An input file is malformed or violates dataset invariants."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(CounterClrError):
    """A computation produced a non-finite value or failed to converge."""


class TrainingError(NumericalError):
    """Training diverged; carries epoch/step context in the message."""


class CheckpointError(DataFormatError):
    """A checkpoint file cannot be loaded (bad structure or version)."""
