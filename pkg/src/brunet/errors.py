"""Error types shared across the package."""


class ConfigError(ValueError):
    """A configuration or shape contract was violated."""


class GraphStateError(RuntimeError):
    """An operation was invoked in an invalid graph state (e.g. backward before forward)."""


class NumericError(ArithmeticError):
    """A NaN/Inf value surfaced during a forward or backward pass."""
