"""Certified synchronizing controllers for networks of nonlinear control-affine agents."""

__version__ = "0.1.0"
