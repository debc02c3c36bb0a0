"""Object-level video anomaly detection from down-scaled context prediction."""

__version__ = "0.1.0"
