"""Domain-adaptive embedding learning with collaborative refinement on toy domains."""

__version__ = "0.1.0"
