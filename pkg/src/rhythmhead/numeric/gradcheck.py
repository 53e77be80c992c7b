"""Central finite-difference oracle for the gradient tape.

Run checks inside ``precision(np.float64)``: float32 round-off alone exceeds
a 1e-4 relative tolerance for coordinates with small gradients.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, precision


def _scalar(value: Tensor) -> float:
    v = float(np.asarray(value.data).reshape(-1)[0]) if value.size == 1 else None
    if v is None:
        raise ValueError(f"function must return a scalar, got shape {value.shape}")
    if not np.isfinite(v):
        raise FloatingPointError("function returned a non-finite value")
    return v


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))))


def gradient_errors(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    epsilon: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Max relative error between backward() and central differences, per tensor.

    ``fn`` takes no arguments and closes over ``tensors``; each must have
    ``requires_grad`` set.  ``max_coords`` samples a subset of coordinates.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for t in tensors:
        t.grad = None
    out = fn()
    _scalar(out)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    errors = []
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = _scalar(fn())
                flat[i] = orig - epsilon
                fm = _scalar(fn())
                flat[i] = orig
                numeric[n] = (fp - fm) / (2.0 * epsilon)
        errors.append(relative_error(ga.reshape(-1)[idx], numeric))
    for t in tensors:
        t.grad = None
    return errors


def finite_difference_check(fn: Callable[[Tensor], Tensor], point: Tensor, epsilon: float = 1e-3) -> float:
    """Max over coordinates of |analytic - central difference| / max(1e-8, |central difference|).

    The probe point is promoted to float64 so the differences are not
    swamped by float32 round-off.
    """
    with precision(np.float64):
        x = Tensor(np.array(point.data, dtype=np.float64), requires_grad=True)
        return gradient_errors(lambda: fn(x), [x], epsilon)[0]
