"""End-to-end calibrated sequential recommendation."""

__version__ = "0.1.0"
