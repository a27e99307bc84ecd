"""Curvature-aligned federated learning: simulator, curvature tools and fairness metrics."""

__version__ = "0.1.0"
