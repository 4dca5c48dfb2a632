"""NASGS - noise-aware Gaussian splatting for imaging sonar."""

__version__ = "0.1.0"

__all__ = ["__version__"]
