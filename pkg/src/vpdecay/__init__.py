"""Numerical laboratory for linear and nonlinear Landau damping on R^d."""

from .errors import VPDecayError

__version__ = "0.1.0"
__all__ = ["VPDecayError", "__version__"]
