"""Physics-regularized joint-state prediction from a sparse set of IMUs."""

__version__ = "0.1.0"
