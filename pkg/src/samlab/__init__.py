"""Sharpness-aware minimization versus gradient descent on quadratic problems.

Closed-form error curves, exact SAM/GD engines, indefinite kernels and a
seeded experiment harness.
"""
__version__ = "0.1.0"
