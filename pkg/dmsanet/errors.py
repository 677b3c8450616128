"""Exceptions raised by the dmsanet library.

The command tools translate these into status dictionaries and exit codes;
library code never returns error codes itself.
"""
from typing import Optional


class DmsaError(Exception):
    """Base class for every error raised by dmsanet."""


class ShapeMismatch(DmsaError):
    """Tensor extents are incompatible with an operation's contract."""


class InvalidGroups(DmsaError):
    """A channel count is not divisible by the requested number of groups."""


class InvalidConfig(DmsaError):
    """A configuration violates one of its invariants."""


class UnknownVariant(DmsaError):
    """An ablation variant name is not recognised."""


class NonFiniteObjective(DmsaError):
    """A gradient-check objective evaluated to NaN or Inf."""


class DivergenceDetected(DmsaError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class WeightFormatError(DmsaError):
    """A weight file is truncated, has a bad header, or fails its CRC."""


class ConfigFileError(DmsaError):
    """A network configuration file is malformed."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.field = field
        self.line = line

    def diagnostic(self) -> str:
        parts = []
        if self.line is not None:
            parts.append(f"line {self.line}")
        if self.field is not None:
            parts.append(f"field '{self.field}'")
        where = ", ".join(parts)
        return f"{where}: {self}" if where else str(self)
