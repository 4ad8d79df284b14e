"""Area-based timber volume estimation from airborne laser scanning."""

__version__ = "0.1.0"
