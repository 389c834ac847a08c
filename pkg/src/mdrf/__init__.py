"""Physics-informed reconstruction of ocean-like fields from sparse observations."""

__version__ = "0.1.0"
