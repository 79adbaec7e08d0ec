"""Exception types shared across the package."""


class SchemaError(ValueError):
    """Malformed schema document or schema invariant violation."""


class DataError(ValueError):
    """Dataset content incompatible with the schema."""


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class NumericalFailure(RuntimeError):
    """Non-finite quantity encountered where a finite one is required."""
