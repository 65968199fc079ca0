"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes or channel counts do not satisfy an operation's contract."""


class ConfigurationError(ValueError):
    """A model/ratio configuration is invalid (e.g. non-integral channel split)."""


class FormatError(ValueError):
    """A serialized file does not match the expected binary layout."""
