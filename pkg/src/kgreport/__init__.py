"""Clinical-graph-grounded transformer for ophthalmic report generation."""

__version__ = "0.1.0"
