"""Exception types raised on invalid parameters."""


class ParameterError(ValueError):
    """An argument violates a documented precondition."""


class CapacityError(ParameterError):
    """More spreading sequences were requested than the code family provides."""
