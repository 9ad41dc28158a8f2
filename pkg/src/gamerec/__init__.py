"""Social- and context-aware game recommendation from playtime logs."""

__version__ = "0.1.0"
