"""Exception types shared across the package."""


class StateError(RuntimeError):
    """Raised when an object is used in a state that does not permit the call.

    Examples: deforming with an uninitialized field, calling a backward pass
    without a recorded forward, or breaking the Gaussian/track correspondence
    while the track loss is active.
    """


class ConfigError(ValueError):
    """Invalid or unknown configuration keys."""


class DataError(ValueError):
    """Malformed dataset, script or checkpoint contents."""


class NumericError(FloatingPointError):
    """Non-finite loss or parameters encountered during optimization."""
