"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES).
"""


class LungCadError(Exception):
    """Base class for all package errors."""


class FormatError(LungCadError):
    """Malformed or unreadable input file."""


class UnsupportedFormatError(FormatError):
    """File parsed but uses an element type / encoding we do not support."""


class ParseError(FormatError):
    """Row/field level parse failure; message carries the location."""


class ValidationError(LungCadError):
    """Arguments violate an operation's preconditions."""


class DegenerateInputError(ValidationError):
    """Input is structurally valid but degenerate (e.g. constant volume)."""


class OutOfBoundsError(ValidationError):
    """A world-space point falls outside the target grid."""


class ConfigurationError(LungCadError):
    """Inconsistent pipeline configuration (e.g. margin < scorer field of view)."""


class GenerationError(LungCadError):
    """Phantom generation could not satisfy its placement constraints."""


class EmptyBagError(LungCadError):
    """No candidates available to build a MIL bag."""
