"""Error taxonomy shared across modules; the CLI maps these to exit codes."""


class ConfigError(ValueError):
    """Invalid configuration value or combination (exit code 1)."""


class DataError(ValueError):
    """Malformed, missing, or inconsistent data artifact (exit code 2)."""
