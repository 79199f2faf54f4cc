"""Unified 2D/3D vision-language pre-training with language-guided slice selection."""

__version__ = "0.1.0"
