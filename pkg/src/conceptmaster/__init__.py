"""Multi-concept video customization at toy scale."""

__version__ = "0.1.0"
