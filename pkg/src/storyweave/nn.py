"""Parameter containers and the small set of layers the models are built from.

Weights are not drawn at construction time. ``Module.init_weights(seed)``
draws every parameter from a generator keyed by ``(seed, parameter name)``,
so two models that share a parameter name get the same values no matter
which optional submodules each of them carries.
"""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, shape, init: str = "uniform", fan_in: int | None = None, std: float | None = None):
        super().__init__(np.zeros(shape, dtype=T.get_default_dtype()), requires_grad=True)
        self.init = init
        self.fan_in = fan_in
        self.std = std

    def reset(self, rng: np.random.Generator) -> None:
        dtype = T.get_default_dtype()
        if self.init == "zeros":
            self.data = np.zeros(self.shape, dtype=dtype)
        elif self.init == "ones":
            self.data = np.ones(self.shape, dtype=dtype)
        elif self.init == "normal":
            self.data = (rng.standard_normal(self.shape) * (self.std or 1.0)).astype(dtype)
        elif self.init == "uniform":
            bound = 1.0 / np.sqrt(self.fan_in or self.shape[0])
            self.data = rng.uniform(-bound, bound, self.shape).astype(dtype)
        else:
            raise ValueError(f"unknown init {self.init!r}")


def param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def init_weights(self, seed: int = 0) -> "Module":
        for name, p in self.named_parameters():
            p.reset(param_rng(seed, name))
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            if missing:
                raise KeyError(f"missing parameters in state: {missing[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise T.ShapeError(f"parameter {name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(T.get_default_dtype())

    def train(self, flag: bool = True) -> "Module":
        self.training = flag
        for _, child in self.named_children():
            child.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Linear(Module):
    """y = x @ weight + bias, weight stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        init = "zeros" if zero else "uniform"
        self.weight = Parameter((d_in, d_out), init, fan_in=d_in)
        self.bias = Parameter((d_out,), init, fan_in=d_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: str = "zeros",
                 zero: bool = False, bias: bool = True):
        init = "zeros" if zero else "uniform"
        fan_in = c_in * kernel * kernel
        self.weight = Parameter((c_out, c_in, kernel, kernel), init, fan_in=fan_in)
        self.bias = Parameter((c_out,), init, fan_in=fan_in) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class TemporalConv1d(Module):
    """Convolution over the frame axis of x[batch, c, n]."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, padding: str = "replicate", zero: bool = False):
        init = "zeros" if zero else "uniform"
        fan_in = c_in * kernel
        self.weight = Parameter((c_out, c_in, kernel), init, fan_in=fan_in)
        self.bias = Parameter((c_out,), init, fan_in=fan_in)
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d_temporal(x, self.weight, self.bias, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.weight = Parameter((channels,), "ones")
        self.bias = Parameter((channels,), "zeros")

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter((dim,), "ones")
        self.bias = Parameter((dim,), "zeros")

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int | None = None, d_out: int | None = None, zero_out: bool = False,
                 act: str = "gelu"):
        hidden = hidden or 4 * dim
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, d_out or dim, zero=zero_out)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        h = T.gelu(h) if self.act == "gelu" else T.silu(h)
        return self.fc2(h)


def group_count(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g
