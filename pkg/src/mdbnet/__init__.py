"""Desk-scale semantic scene completion with a dual-head RGB + F-TSDF network."""

__version__ = "0.1.0"
