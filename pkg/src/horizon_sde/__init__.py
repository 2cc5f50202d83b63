"""Receding horizon control of stochastic differential equations: closed forms,
a finite-difference HJB solver, and Monte Carlo stability checks."""

__version__ = "0.1.0"
