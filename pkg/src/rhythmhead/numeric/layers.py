"""Parameterized layers and a small module container."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype

KINDS = ("conv1d", "conv2d", "transposed-conv2d", "linear", "layer-norm")


@dataclass
class LayerParams:
    kind: str
    weight: Tensor
    bias: Tensor | None = None
    stride: int | tuple[int, int] = 1
    padding: int | tuple[int, int] = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        expected_rank = {"conv1d": 3, "conv2d": 4, "transposed-conv2d": 4, "linear": 2, "layer-norm": 1}[self.kind]
        if self.weight.ndim != expected_rank:
            raise ValueError(f"{self.kind} weight must have rank {expected_rank}, got shape {self.weight.shape}")

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.weight, self.bias) if p is not None]

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def forward(layer: LayerParams, x) -> Tensor:
    """Apply ``layer`` to ``x``; shape errors name both shapes."""
    k = layer.kind
    if k == "linear":
        return F.linear(x, layer.weight, layer.bias)
    if k == "conv2d":
        return F.conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if k == "conv1d":
        return F.conv1d(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if k == "transposed-conv2d":
        return F.conv_transpose2d(x, layer.weight, layer.bias, layer.stride, layer.padding)
    return F.layer_norm(x, layer.weight, layer.bias)


def _he_uniform(rng: np.random.Generator, shape, fan_in: float) -> Tensor:
    bound = np.sqrt(6.0 / max(fan_in, 1.0))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(get_default_dtype()), requires_grad=True)


def _bias(n: int) -> Tensor:
    return Tensor(np.zeros(n, dtype=get_default_dtype()), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)


def linear(rng, n_in: int, n_out: int, zero: bool = False, bias: bool = True) -> LayerParams:
    w = _zeros((n_out, n_in)) if zero else _he_uniform(rng, (n_out, n_in), n_in)
    return LayerParams("linear", w, _bias(n_out) if bias else None)


def conv2d(rng, c_in: int, c_out: int, k=3, stride=1, padding=None, zero: bool = False, bias: bool = True) -> LayerParams:
    kh, kw = (k, k) if isinstance(k, int) else k
    if padding is None:
        padding = (kh // 2, kw // 2)
    shape = (c_out, c_in, kh, kw)
    w = _zeros(shape) if zero else _he_uniform(rng, shape, c_in * kh * kw)
    return LayerParams("conv2d", w, _bias(c_out) if bias else None, stride, padding)


def conv1d(rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int | None = None) -> LayerParams:
    if padding is None:
        padding = k // 2
    w = _he_uniform(rng, (c_out, c_in, k), c_in * k)
    return LayerParams("conv1d", w, _bias(c_out), stride, padding)


def conv_transpose2d(rng, c_in: int, c_out: int, k: int = 4, stride: int = 2, padding: int = 1) -> LayerParams:
    w = _he_uniform(rng, (c_in, c_out, k, k), c_in * k * k / (stride * stride))
    return LayerParams("transposed-conv2d", w, _bias(c_out), stride, padding)


def layer_norm(n: int) -> LayerParams:
    return LayerParams("layer-norm", Tensor(np.ones(n, dtype=get_default_dtype()), requires_grad=True), _bias(n))


class Module:
    """Attribute-walking parameter container.

    Parameters are every ``LayerParams`` and trainable ``Tensor`` reachable
    through attributes, lists, tuples and dicts, named by attribute path.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from _walk(self, prefix.rstrip("."), seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(obj, prefix: str, seen: set[int]) -> Iterator[tuple[str, Tensor]]:
    def join(name):
        return f"{prefix}.{name}" if prefix else str(name)

    if isinstance(obj, Tensor):
        if obj.requires_grad and id(obj) not in seen:
            seen.add(id(obj))
            yield prefix, obj
    elif isinstance(obj, LayerParams):
        yield from _walk(obj.weight, join("weight"), seen)
        if obj.bias is not None:
            yield from _walk(obj.bias, join("bias"), seen)
    elif isinstance(obj, Module):
        for name, value in vars(obj).items():
            if not name.startswith("_"):
                yield from _walk(value, join(name), seen)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from _walk(value, join(i), seen)
    elif isinstance(obj, dict):
        for key in sorted(obj):
            yield from _walk(obj[key], join(key), seen)
