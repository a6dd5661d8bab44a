"""Adversarial multitask landmark and contour detection."""

__version__ = "0.1.0"
