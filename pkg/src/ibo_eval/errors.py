class ConfigurationError(ValueError):
    """Invalid configuration, missing inputs or unsupported options."""


class DataError(ValueError):
    """Malformed data: shape mismatches, undecodable files."""
