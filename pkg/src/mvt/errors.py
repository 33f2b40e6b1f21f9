"""Exception taxonomy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, DataFormatError -> 3,
NumericsError -> 4, failed checks -> 1.
"""


class MvtError(Exception):
    """Base class for all package errors."""


class ShapeError(MvtError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(MvtError):
    """A configuration (model, branch, CLI) violates an invariant."""


class DataFormatError(MvtError):
    """A file on disk does not match its declared binary/text format."""


class NumericsError(MvtError):
    """Non-finite values or numerical degeneracy where finite math was required."""
