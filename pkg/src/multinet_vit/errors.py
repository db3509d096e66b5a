"""Exception types that map onto CLI exit codes (1 config, 2 data, 3 numeric)."""


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class DataError(RuntimeError):
    """Dataset missing, malformed or undecodable."""


class NumericalError(RuntimeError):
    """Loss became NaN or infinite."""
