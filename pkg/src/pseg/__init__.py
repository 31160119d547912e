"""Class-agnostic image segmentation with line features on the projective sphere."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
