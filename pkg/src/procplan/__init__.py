"""Event-guided procedure planning from start/goal visual states."""

__version__ = "0.1.0"
