"""h5ad -> native spatial dataset converter."""

__version__ = "0.1.0"


class ConversionError(Exception):
    """Raised when an input file cannot be converted."""
