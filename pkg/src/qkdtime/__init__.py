"""Desk-scale simulator of quantum-secured time transfer between two timing facilities."""

__version__ = "0.1.0"
