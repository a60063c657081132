"""Parking occupancy forecasting with adversarial domain adaptation."""

__version__ = "0.1.0"
