"""Shared exception types."""


class ShapeError(ValueError):
    """Operands have incompatible extents."""


class InputError(ValueError):
    """An input value violates an operation's preconditions."""


class ConfigError(ValueError):
    """A configuration is inconsistent or refers to missing state."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class CheckpointError(RuntimeError):
    """A checkpoint or tensor file does not match what the loader expects."""
