"""Frequency-domain backdoor attacks on no-reference image-quality regressors."""
__version__ = "0.1.0"
