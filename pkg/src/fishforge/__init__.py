"""Synthetic FISH patch generation, desk-scale contrastive training, and
uncertainty calibration."""

__version__ = "0.1.0"
