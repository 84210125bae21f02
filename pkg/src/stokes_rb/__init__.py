"""Certified reduced-basis workbench for the time-dependent Stokes channel problem."""

__version__ = "0.1.0"
