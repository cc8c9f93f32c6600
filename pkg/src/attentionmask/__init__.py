"""Class-agnostic mask proposals with scale-specific objectness attention."""

__version__ = "0.1.0"
