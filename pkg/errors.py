"""
Exception hierarchy for slotlog.

Every library error carries the process exit code the CLI reports for it, so
cli.main_wrapper can map failures without knowing where they came from.
"""

from typing import Optional


class SlotlogError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class ParseError(SlotlogError):
    """Program text that does not follow the grammar, or breaks a parse-time rule."""

    exit_code = 2

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)


class ValidationError(SlotlogError):
    """A parsed program the validator rejected; `report` lists every violation."""

    exit_code = 3

    def __init__(self, report):
        self.report = report
        super().__init__("; ".join(str(v) for v in report.violations) or "invalid program")


class GroundingError(SlotlogError):
    """Cycles, unbound builtin arguments or runaway recursion while grounding."""

    exit_code = 3


class ConfigurationError(SlotlogError):
    """Experiment configuration that does not match its schema."""

    exit_code = 3


class InterfaceError(SlotlogError):
    """A program whose fact keys do not match what the perception heads produce."""

    exit_code = 3


class MissingParameterError(SlotlogError):
    """A circuit variable without a binding in the parameter table."""

    exit_code = 4


class ParameterError(SlotlogError):
    """A parameter outside [0, 1] or a class vector off the simplex."""

    exit_code = 4


class CapacityError(SlotlogError):
    """Instance too large for exact compilation or for the enumeration oracle."""

    exit_code = 5


class DivergenceError(SlotlogError):
    """Training produced a non-finite loss."""

    exit_code = 6


class UnsatisfiableSplitError(SlotlogError):
    """A dataset split that the scene settings cannot produce."""

    exit_code = 7


class ShapeError(SlotlogError):
    """Tensor shapes incompatible with a primitive."""


class AutodiffError(SlotlogError):
    """Misuse of the tape: non-scalar roots, seeds on tensors the tape never saw."""
