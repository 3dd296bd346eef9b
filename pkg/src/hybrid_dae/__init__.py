"""Transient power-system simulation with pluggable per-machine integrators.

Each dynamic component is turned into algebraic step equations by an
"algebraizer" (trapezoidal rule, backward Euler, or a trained neural
surrogate) and solved simultaneously with the network equations by
Newton-Raphson.
"""

__version__ = "0.1.0"
