"""Grade prediction for not-yet-taken courses from historical grade records."""

__version__ = "0.1.0"
