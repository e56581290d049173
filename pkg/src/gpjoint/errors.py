"""Exception taxonomy shared across the package.

Three failure families map onto the CLI exit codes: bad inputs
(validation, exit 2), numeric breakdowns (exit 3), and file or parse
problems (exit 4).  Library code raises these; the command layer
translates them.
"""


class GpjointError(Exception):
    """Base class for all package errors."""


class DomainError(GpjointError, ValueError):
    """An argument value lies outside the mathematically valid domain."""


class ContractError(GpjointError, ValueError):
    """Inputs are structurally inconsistent (shapes, lengths, labels)."""


class ValidationError(GpjointError, ValueError):
    """User-supplied data or configuration failed validation."""


class NumericError(GpjointError, RuntimeError):
    """A numeric routine failed to produce a usable result."""


class InputOutputError(GpjointError, OSError):
    """A file could not be read, parsed, or written."""
