"""Open-vocabulary 3D scene graphs from posed RGB-D sequences."""

__version__ = "0.1.0"
