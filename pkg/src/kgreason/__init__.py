"""Joint propositional and first-order reasoning over knowledge graphs."""

__version__ = "0.1.0"
