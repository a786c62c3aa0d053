"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or input schema; maps to CLI exit code 2."""


class NumericError(RuntimeError):
    """A numeric procedure failed (non-SPD solve, invalid moments); CLI exit code 3."""
