"""Residual-space diffusion super-resolution of scalar surface fields,
conditioned on a frozen reflectance encoder via cross-attention."""

__version__ = "0.1.0"
