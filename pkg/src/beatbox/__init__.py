"""Self-hostable platform for reproducible pattern-recognition experiments."""

__version__ = "0.1.0"
