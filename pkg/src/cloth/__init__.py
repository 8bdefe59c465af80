"""Class-aware optimal transport with higher-order moment matching for UDA."""

__version__ = "0.1.0"
