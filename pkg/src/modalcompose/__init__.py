"""Modality-composable diffusion policies on a small numpy substrate."""

__version__ = "0.1.0"
