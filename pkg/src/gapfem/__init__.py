"""Hybridized Nitsche coupling of multipatch surface PDE problems across gaps."""

__version__ = "0.1.0"
