"""Online video test-time adaptation by feature-statistic alignment."""

__version__ = "0.1.0"
