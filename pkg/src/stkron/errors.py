"""Shared exception types.

The CLI maps these onto exit codes: ValueError (and ParseError) -> 2,
CapacityError -> 3, NumericalError -> 4.
"""


class ParseError(ValueError):
    """Malformed input file; message names the offending row."""


class CapacityError(RuntimeError):
    """Problem size exceeds a configured dense/memory cap."""


class NumericalError(RuntimeError):
    """Factorization or sampler failure that is not a usage error."""
