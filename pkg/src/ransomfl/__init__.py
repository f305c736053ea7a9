"""Federated ransomware detection from storage access-pattern telemetry."""

__version__ = "0.1.0"
