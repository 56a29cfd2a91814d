"""Automated tumor-cell scoring on stained tissue images."""

__version__ = "0.1.0"
