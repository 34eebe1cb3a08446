"""SGD driven by MCMC gradient estimators, with exact finite-state oracles."""

__version__ = "0.1.0"
