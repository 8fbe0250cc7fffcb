"""Cooperative lane-level positioning for road users sharing GNSS fixes."""

__version__ = "0.1.0"
