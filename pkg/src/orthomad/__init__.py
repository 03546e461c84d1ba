"""Morphing-attack detection with an orthogonality-regularised two-headed classifier."""

__version__ = "0.1.0"
