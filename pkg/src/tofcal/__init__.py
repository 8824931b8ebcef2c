"""Timing calibration toolkit for a slab / one-to-one coincidence detector pair."""

__version__ = "0.1.0"
