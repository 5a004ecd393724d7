"""Layer-copy policy transfer between toy legged robots."""

__version__ = "0.1.0"
