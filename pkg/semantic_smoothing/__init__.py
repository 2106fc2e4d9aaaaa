"""Certified robustness for small text classifiers by latent randomized smoothing."""

__version__ = "0.1.0"
