"""End-to-end learned channel coding with generative channel surrogates."""

__version__ = "0.1.0"
