"""Graph-based fusion of frozen encoder features for image-text retrieval."""

__version__ = "0.1.0"
