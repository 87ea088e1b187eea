"""Device-side intelligence stratum middleware."""

__version__ = "0.1.0"
