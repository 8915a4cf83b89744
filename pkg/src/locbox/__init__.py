"""Probabilistic bounding-box localization with In-Out and Border probabilities."""

__version__ = "0.1.0"
