"""Multi-tower contrastive matching of street photos to catalog products."""

__version__ = "0.1.0"
