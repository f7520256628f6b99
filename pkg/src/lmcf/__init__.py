"""Numerical laboratory for curve shortening flow with expander surgery."""
