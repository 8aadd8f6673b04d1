"""Numerically constructed equivariant layers and MDP homomorphic networks."""

__version__ = "0.1.0"
