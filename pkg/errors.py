"""Exception hierarchy for plrnn-ssm.

Every error raised on purpose by this package derives from PlrnnSsmError,
so callers can catch the whole family in one place. Concrete classes also
inherit the builtin they refine (ValueError, LinAlgError, RuntimeError) so
generic handlers keep working.

Usage:
    from errors import DimensionError

    if X.shape[1] != B.shape[0]:
        raise DimensionError("X", X.shape, (X.shape[0], B.shape[0]))
"""

from typing import Any, Optional, Sequence

import numpy as np


class PlrnnSsmError(Exception):
    """Base class for all package errors."""


class DimensionError(PlrnnSsmError, ValueError):
    """Operand shapes disagree.

    Args:
        operand: Name of the offending operand (e.g. 'B', 'inputs')
        got: Shape that was supplied
        expected: Shape that was required, if known
        detail: Optional free-text explanation
    """

    def __init__(
        self,
        operand: str,
        got: Optional[Sequence[int]] = None,
        expected: Optional[Sequence[int]] = None,
        detail: str = "",
    ):
        self.operand = operand
        self.got = tuple(got) if got is not None else None
        self.expected = tuple(expected) if expected is not None else None
        message = f"Dimension mismatch in '{operand}'"
        if self.got is not None:
            message += f": got shape {self.got}"
        if self.expected is not None:
            message += f", expected {self.expected}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class ParameterError(PlrnnSsmError, ValueError):
    """A structural constraint on a parameter is violated."""

    def __init__(self, operand: str, detail: str):
        self.operand = operand
        super().__init__(f"Invalid parameter '{operand}': {detail}")


class SingularSystemError(PlrnnSsmError, np.linalg.LinAlgError):
    """A linear solve failed even after ridge or jitter escalation."""

    def __init__(self, what: str, condition_number: Optional[float] = None):
        self.what = what
        self.condition_number = condition_number
        message = f"Singular system in {what}"
        if condition_number is not None:
            message += f" (condition number {condition_number:.3e})"
        super().__init__(message)


class ConvergenceWarning(RuntimeWarning):
    """An iterative routine hit its iteration cap."""


class TrainingError(PlrnnSsmError, RuntimeError):
    """An annealing step failed.

    The last successfully completed FitResult is attached as `checkpoint`
    (None when the very first step failed).
    """

    def __init__(self, step: str, cause: BaseException, checkpoint: Any = None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"Training step '{step}' failed: {cause}")


class DataValidationError(PlrnnSsmError, ValueError):
    """A data file violates its schema. Carries row/column diagnostics."""

    def __init__(
        self,
        source: str,
        detail: str,
        row: Optional[int] = None,
        column: Optional[str] = None,
    ):
        self.source = source
        self.row = row
        self.column = column
        location = ""
        if row is not None:
            location += f" row {row}"
        if column is not None:
            location += f" column '{column}'"
        super().__init__(f"{source}{location}: {detail}")


class ConfigValidationError(PlrnnSsmError, ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, field: str, detail: str):
        self.field = field
        super().__init__(f"Invalid configuration field '{field}': {detail}")
