from __future__ import annotations


class Bridge3DError(Exception):
    """Base class for every failure raised by the package."""


class DimensionError(Bridge3DError, ValueError):
    """Shapes or extents do not agree."""


class ContractError(Bridge3DError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(Bridge3DError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(Bridge3DError, ValueError):
    """A binary or JSON artifact is malformed or has the wrong version."""


class UsageError(Bridge3DError):
    """Bad command-line usage; the CLI exits with status 2."""
