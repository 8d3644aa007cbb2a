class ConfigError(ValueError):
    """Invalid configuration or user input."""


class NumericError(ArithmeticError):
    """Non-finite values or a numerically degenerate computation."""


class SingularFlowError(NumericError):
    """A flow step whose Jacobian determinant is (near) zero."""
