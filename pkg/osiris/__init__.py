"""Cycle-level and analytical simulator for a systolic CKKS accelerator."""

__version__ = "0.1.0"
