"""Unbiased gradient estimators for alpha-divergence variational inference,
closed-form signal-to-noise theory for Gaussian families, and experiment drivers."""

__version__ = "0.1.0"
