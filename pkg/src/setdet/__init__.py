"""Desk-scale set-prediction object detection.

Subpackages are importable directly; the most common entry points are
re-exported here.
"""

from .tensor import (
    DimensionError,
    EvaluationError,
    Parameter,
    Tensor,
    grad_check,
    no_grad,
)

__all__ = [
    "DimensionError",
    "EvaluationError",
    "Parameter",
    "Tensor",
    "grad_check",
    "no_grad",
]

__version__ = "0.1.0"
