"""Hierarchical deep CNN toolkit."""

from hdcnn.kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
