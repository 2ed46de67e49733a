"""Minimal float64 reverse-mode autodiff used by every model and algorithm."""

from . import ops  # noqa: F401  (registers op kinds)
from .adam import Adam, AdamState, adam_step
from .core import (
    OPS,
    Graph,
    NumericError,
    ShapeError,
    Tensor,
    backward,
    constant,
    forward,
    parameter,
)
from .gradcheck import finite_difference_check

__all__ = [
    "OPS",
    "Adam",
    "AdamState",
    "Graph",
    "NumericError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "constant",
    "finite_difference_check",
    "forward",
    "parameter",
]
