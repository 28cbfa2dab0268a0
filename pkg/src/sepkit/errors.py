"""Shared exception types.

Exit-code mapping used by the CLI: InvalidArgument -> 1 (usage),
FormatError -> 2 (data/format), NumericError -> 3 (numeric failure).
"""


class InvalidArgument(ValueError):
    """A precondition on an operation's arguments was violated."""


class FormatError(Exception):
    """A file or serialized structure does not match its documented format."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where finiteness is required."""
