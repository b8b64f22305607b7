"""Learning time-varying temporal causal graphs from multivariate time series."""

__version__ = "0.1.0"
