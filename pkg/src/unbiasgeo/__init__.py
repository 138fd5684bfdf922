"""Bias-reducing priors for MAP plug-in estimators on statistical manifolds."""

__version__ = "0.1.0"
