"""Exception types shared across the package.

The CLI maps these onto its exit-code taxonomy, so library code raises the
most specific one that applies.
"""


class TernpackError(Exception):
    """Base class for all package errors."""


class ConstraintError(TernpackError, ValueError):
    """Input violates a shape, granularity or sparsity constraint."""


class FormatError(TernpackError, ValueError):
    """A serialized container or packed plane is malformed."""
