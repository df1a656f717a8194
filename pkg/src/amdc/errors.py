"""Exception types shared across the package."""


class AmdcError(Exception):
    """Base class for all package errors."""


class ShapeError(AmdcError):
    """Raised when tensor/array shapes violate an operation's contract."""


class FormatError(AmdcError):
    """Raised on malformed serialized files (bad magic, truncation, version)."""


class ContractError(AmdcError):
    """Raised when a caller violates a documented precondition."""
