"""Multi-label contrastive learning for article frame classification."""

__version__ = "0.1.0"
