"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array does not have the shape a kernel or model expects."""


class ConfigError(ValueError):
    """A model, dataset or run configuration is invalid."""


class FormatError(ValueError):
    """A file on disk does not follow the expected binary layout."""
