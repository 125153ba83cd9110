"""Online detection of spurious features in a non-stationary stream."""

__version__ = "0.1.0"
