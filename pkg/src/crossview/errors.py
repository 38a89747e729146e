"""Exception types shared across the package."""


class CrossViewError(Exception):
    """Base class for package-specific errors."""


class ShapeError(CrossViewError, ValueError):
    """Operand shapes are inconsistent with an operation's contract."""


class ConfigError(CrossViewError, ValueError):
    """A configuration value is outside the supported range."""


class ContractError(CrossViewError, RuntimeError):
    """An internal invariant or call contract was violated."""


class NumericsError(CrossViewError, ArithmeticError):
    """Non-finite values appeared where finite math was required."""


class DataFormatError(CrossViewError, ValueError):
    """An on-disk artifact does not match its documented format."""
