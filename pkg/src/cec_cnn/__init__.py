"""Consecutive expansion-contraction CNN on a small numpy autodiff engine."""

from .arch import ArchitectureSpec, Model, build_network, direct_bp_audit, shape_walk
from .tensor import NumericError, ShapeError, TapeError, Tensor, backward

__all__ = [
    "ArchitectureSpec",
    "Model",
    "NumericError",
    "ShapeError",
    "TapeError",
    "Tensor",
    "backward",
    "build_network",
    "direct_bp_audit",
    "shape_walk",
]

__version__ = "0.1.0"
