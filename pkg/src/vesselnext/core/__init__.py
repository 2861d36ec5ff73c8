"""Tensor engine: float64 arrays, taped reverse-mode gradients, MAC meter."""

from . import functional, meter
from .tensor import ShapeError, Tape, TapeError, Tensor, backward

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "backward",
    "functional",
    "meter",
]
