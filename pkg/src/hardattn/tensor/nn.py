"""Parameter containers and the layer set used by the model."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import engine as E
from . import functional as F
from .engine import Tensor


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Tree of parameters, buffers and submodules addressed by dotted names."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + "/")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + "/")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @contextlib.contextmanager
    def evaluating(self):
        """Temporarily switch every submodule to eval mode, restoring each flag after."""
        saved = [(m, m.training) for m in self.modules()]
        self.eval()
        try:
            yield self
        finally:
            for m, flag in saved:
                object.__setattr__(m, "training", flag)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.01) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(E.get_default_dtype())


def _zeros(*shape) -> np.ndarray:
    return np.zeros(shape, dtype=E.get_default_dtype())


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(_zeros(cout)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.stride = stride
        # each output pixel of a transposed conv sums cin * k*k / stride^2 terms
        self.weight = Parameter(kaiming_uniform(rng, (cin, cout, k, k), max(1, cin * k * k // stride ** 2)))
        self.bias = Parameter(_zeros(cout))

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride)


class Linear(Module):
    """Dense layer on (..., in) arrays; same map as a 1x1 convolution."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator, zero: bool = False):
        super().__init__()
        w = _zeros(din, dout) if zero else kaiming_uniform(rng, (din, dout), din)
        self.weight = Parameter(w)
        self.bias = Parameter(_zeros(dout))

    def forward(self, x):
        return E.matmul(x, self.weight) + self.bias


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=E.get_default_dtype()))
        self.beta = Parameter(_zeros(channels))
        self.register_buffer("running_mean", _zeros(channels))
        self.register_buffer("running_var", np.ones(channels, dtype=E.get_default_dtype()))

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class LayerNorm(Module):
    """Normalises over axes 1.. of the input; optional per-channel affine."""

    def __init__(self, channels: int | None = None, axes=(1, 2, 3), eps: float = 1e-5):
        super().__init__()
        self.axes, self.eps = axes, eps
        if channels is not None:
            self.gamma = Parameter(np.ones((1, channels, 1, 1), dtype=E.get_default_dtype()))
            self.beta = Parameter(_zeros(1, channels, 1, 1))
        else:
            self.gamma = self.beta = None

    def forward(self, x):
        return F.layer_norm(x, self.axes, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, p: float = 0.5):
        super().__init__()
        self.p = p
        self.rng: np.random.Generator | None = None

    def forward(self, x):
        return F.dropout(x, self.p, self.rng, self.training)
