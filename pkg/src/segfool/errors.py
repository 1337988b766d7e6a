"""Exception types shared across the package."""
from typing import Optional


class ContractError(ValueError):
    """A precondition of an operation was violated (bad shape, bad argument)."""


class FormatError(ValueError):
    """A file on disk does not match its declared binary or text format."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AttackDiverged(RuntimeError):
    """A loss became NaN during optimization."""
