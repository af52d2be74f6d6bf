"""
Typed errors raised across the PVLR code base.

Every error derives from ``PvlrError`` and from the builtin it refines, so a
caller may catch either the specific type or the generic builtin.
"""

from typing import Optional


class PvlrError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PvlrError, ValueError):
    """Operand shapes do not agree."""


class EmptyInputError(PvlrError, ValueError):
    """An operation received an empty sequence, text or tensor."""


class DegenerateInputError(PvlrError, ValueError):
    """An input row has (near) zero norm where a direction is required."""


class ContractError(PvlrError, RuntimeError):
    """A caller broke an operation's precondition (missing grads, shape drift...)."""


class DeterminismError(PvlrError, RuntimeError):
    """Two evaluations of a supposedly deterministic function disagree."""


class LabelError(PvlrError, ValueError):
    """A target vector holds entries outside {0, 1}."""


class CapacityError(PvlrError, ValueError):
    """More token slots were requested than a feature grid holds."""


class UnsatisfiableError(PvlrError, ValueError):
    """A sampling constraint can never be met."""


class ConfigError(PvlrError, ValueError):
    """A configuration file or override is invalid."""


class NumericError(PvlrError, ArithmeticError):
    """Training produced a non-finite value."""


class FormatError(PvlrError, OSError):
    """A binary file does not follow the expected layout."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


# Process exit codes used by the command line surface
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (NumericError, DeterminismError)):
        return EXIT_NUMERIC
    if isinstance(error, (FormatError, OSError)):
        return EXIT_IO
    return 1
