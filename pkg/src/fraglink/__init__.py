"""Fragment-based, pocket-conditioned molecule generation toolkit."""

__version__ = "0.1.0"
