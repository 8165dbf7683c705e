"""Plug-in aleatoric/epistemic uncertainty estimation for small MLPs."""

__version__ = "0.1.0"
