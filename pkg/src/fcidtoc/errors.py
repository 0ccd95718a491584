"""Exception hierarchy shared across the package.

Messages are prefixed with the module that raised them (``"codebook: ..."``)
so CLI users can tell which stage rejected their input.
"""


class FcidTocError(Exception):
    """Base class for all package errors."""


class ValidationError(FcidTocError, ValueError):
    """Bad user input: shapes, ranges, unknown keys. CLI exit code 2."""


class FormatError(ValidationError):
    """A binary or text artifact could not be parsed."""


class NonFiniteError(FcidTocError, FloatingPointError):
    """A loss or gradient went non-finite at runtime. CLI exit code 1."""
