"""Kronecker-factored curvature approximations for small networks, with an
exact Fisher oracle and an affine-reparameterization test harness."""

__version__ = "0.1.0"
