"""Error classes shared across the pipeline."""


class ConfigError(ValueError):
    """Invalid configuration (bad bounds, missing checkpoint, unfrozen weights)."""


class DataError(ValueError):
    """Invalid or missing data (empty dataset, missing pose label)."""
