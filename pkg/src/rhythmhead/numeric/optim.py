"""Adam optimizer.  Moment buffers live on each tensor's ``state`` slot."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .layers import LayerParams
from .tensor import Tensor

# paper hyperparameters
DEFAULT_LR = 2e-4
DEFAULT_BETAS = (0.5, 0.999)


def _flatten(params) -> list[Tensor]:
    out: list[Tensor] = []
    for p in params:
        if isinstance(p, LayerParams):
            out.extend(p.parameters())
        else:
            out.append(p)
    return out


def adam_step(
    params: Iterable,
    lr: float = DEFAULT_LR,
    beta1: float = DEFAULT_BETAS[0],
    beta2: float = DEFAULT_BETAS[1],
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected Adam update in place.

    Raises ``ValueError`` if any parameter has no gradient.
    """
    tensors = _flatten(params)
    missing = [i for i, p in enumerate(tensors) if p.grad is None]
    if missing:
        raise ValueError(f"{len(missing)} parameter(s) have no gradient (first index {missing[0]}); run backward first")
    for p in tensors:
        if p.state is None:
            p.state = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        st = p.state
        st["t"] += 1
        g = p.grad
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * g * g
        m_hat = st["m"] / (1.0 - beta1 ** st["t"])
        v_hat = st["v"] / (1.0 - beta2 ** st["t"])
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Iterable, lr: float = DEFAULT_LR, betas: tuple[float, float] = DEFAULT_BETAS):
        self.params = _flatten(params)
        self.lr = lr
        self.betas = betas

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        # parameters untouched by this loss (e.g. frozen branches) get an explicit zero gradient
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        adam_step(self.params, self.lr, *self.betas)
