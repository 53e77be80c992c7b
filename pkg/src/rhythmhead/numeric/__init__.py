"""Deterministic tensor engine: reverse-mode tape, layers, Adam, gradient checks."""
import numpy as np

from . import functional
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .gradcheck import finite_difference_check, gradient_errors
from .layers import LayerParams, Module, forward
from .optim import Adam, adam_step
from .tensor import (
    GraphError,
    NonFiniteError,
    Tensor,
    backward,
    get_default_dtype,
    no_grad,
    precision,
)

_rng = None


def seed(value: int) -> None:
    """Reset the run-wide generator."""
    global _rng
    _rng = np.random.default_rng(value)


def get_rng():
    if _rng is None:
        seed(0)
    return _rng


__all__ = [
    "Adam",
    "GraphError",
    "LayerParams",
    "Module",
    "NonFiniteError",
    "Tensor",
    "adam_step",
    "backward",
    "finite_difference_check",
    "forward",
    "functional",
    "get_default_dtype",
    "get_rng",
    "gradient_errors",
    "load_checkpoint",
    "no_grad",
    "precision",
    "save_checkpoint",
    "seed",
]
