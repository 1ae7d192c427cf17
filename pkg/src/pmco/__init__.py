"""Process-migration-based computational offloading for resource-poor devices."""

__version__ = "0.1.0"
