"""Multi-task curriculum learning for open-set semi-supervised classification."""

__version__ = "0.1.0"
