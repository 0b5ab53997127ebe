"""Finite element a posteriori error estimation for the heat equation.

Implicit Euler in time, simplicial Lagrange elements in space,
equilibrated-flux and temporal-jump estimators with two-sided bounds in
the parabolic space-time norms.
"""

__version__ = "0.1.0"
