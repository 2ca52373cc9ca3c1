"""Entity-level judging, curation, and analytics for abstract image editing."""

__version__ = "0.1.0"
