"""Price and resource decomposition for graph-coupled prosumer microgrids."""

__version__ = "0.1.0"
