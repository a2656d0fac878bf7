"""Exception types shared across the package."""


class ModalComposeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ModalComposeError, ValueError):
    """Tensor or vector dimensions do not match a declared interface."""


class ContractError(ModalComposeError, ValueError):
    """A call violated an operation's preconditions."""


class ConfigError(ModalComposeError, ValueError):
    """Invalid configuration value, unknown key, or malformed config file."""


class NumericError(ModalComposeError, ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where finite math is required."""


class FormatError(ModalComposeError, ValueError):
    """A binary file failed magic/version/structure validation."""
