"""Barrier-certificate robustness certification for gradient-trained classifiers."""

__version__ = "0.1.0"
