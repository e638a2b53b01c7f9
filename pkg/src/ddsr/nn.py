"""Small module system on top of :mod:`ddsr.tensor`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from ddsr import tensor as T
from ddsr.tensor import Tensor


class Module:
    """Container of named parameters and child modules.

    Attribute assignment registers parameters (tensors with
    ``requires_grad``) and submodules, in insertion order, so parameter
    names are stable across runs.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter {key!r} in state")
            value = np.asarray(state[key], dtype=T.DTYPE)
            if value.shape != p.shape:
                raise ValueError(f"parameter {key!r}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return T.parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        # Kaiming-uniform for the 0.1 leaky slope, roughly variance preserving
        bound = np.sqrt(6.0 / ((1 + 0.01) * in_features))
        self.weight = T.parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = _uniform(rng, (out_features,), in_features) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"Linear expects last dim {self.in_features}, got shape {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        super().__init__()
        fan_in = in_ch * kernel_size * kernel_size
        bound = np.sqrt(6.0 / ((1 + 0.01) * fan_in))
        self.weight = T.parameter(rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel_size, kernel_size)))
        self.bias = _uniform(rng, (out_ch,), fan_in) if bias else None
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
