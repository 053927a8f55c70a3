"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class ShapeError(ContractError):
    """Operand shapes are incompatible with a primitive."""


class ConfigError(ValueError):
    """Invalid configuration, task spec or architecture mismatch."""


class NumericFault(ArithmeticError):
    """A computation produced NaN or infinity."""


class CheckpointError(IOError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""
