class ConfigError(ValueError):
    """Invalid configuration: bad shapes, dimensions, or option values."""


class NumericError(FloatingPointError):
    """Non-finite values or numerically invalid inputs encountered."""


class DataFormatError(ValueError):
    """Malformed or truncated dataset/checkpoint file."""
