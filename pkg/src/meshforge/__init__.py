"""Subject-area co-occurrence networks and convergence metrics for indexed literature."""

__version__ = "0.1.0"
