"""Error types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value (bad range, unknown key, unparsable file)."""


class CapacityContractError(RuntimeError):
    """Caller inserted into a cache without making room first (caller bug)."""
