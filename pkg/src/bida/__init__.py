"""Bi-directional domain adaptation for cross-domain hyperspectral patch
classification, on a small numpy autodiff engine."""

__version__ = "0.1.0"
