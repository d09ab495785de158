"""Kronecker-factored curvature for linear weight-sharing layers."""

from . import curvature, kfac, losses, net, tensor

__version__ = "0.1.0"

__all__ = ["curvature", "kfac", "losses", "net", "tensor", "__version__"]
