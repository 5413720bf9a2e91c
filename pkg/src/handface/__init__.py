"""Hand-face interaction reconstruction: proxy models, soft-tissue simulation,
physics-aware fitting and evaluation metrics."""

__version__ = "0.1.0"
