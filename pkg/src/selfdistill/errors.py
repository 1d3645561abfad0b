"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """A numeric argument is outside the operation's domain."""


class ContractError(RuntimeError):
    """A caller-side precondition was violated (misuse, not bad data)."""


class FormatError(ValueError):
    """A file or byte stream does not match its declared format."""


class UnsupportedFormatError(FormatError):
    """The byte stream is well formed but in a format we do not read."""


class ConfigError(ValueError):
    """A configuration key or value is invalid."""
