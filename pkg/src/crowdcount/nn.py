"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Param(Tensor):
    """A trainable leaf tensor. ``name`` is filled in by the owning model."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    # resample anything beyond two standard deviations
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)).astype(dtype)


class Module:
    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            if isinstance(val, Param):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise T.DimensionError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        self.weight = Param(trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.bias = Param(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, dilation: int = 1, groups: int = 1, bias: bool = True,
                 init: str = "he", dtype=np.float64):
        shape = (c_out, c_in // groups, k, k)
        if init == "trunc_normal":
            w = trunc_normal(rng, shape, dtype=dtype)
        else:
            w = he_normal(rng, shape, fan_in=(c_in // groups) * k * k, dtype=dtype)
        self.weight = Param(w)
        self.bias = Param(np.zeros(c_out, dtype=dtype)) if bias else None
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float64):
        self.weight = Param(np.ones(d, dtype=dtype))
        self.bias = Param(np.zeros(d, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.weight = Param(np.ones(c, dtype=dtype))
        self.bias = Param(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm_2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, dilation: int = 1,
                 dtype=np.float64):
        self.conv = Conv2d(c_in, c_out, k, rng, padding=dilation * (k - 1) // 2,
                           dilation=dilation, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


def name_parameters(model: Module) -> None:
    names = set()
    for name, p in model.named_parameters():
        if name in names:
            raise ValueError(f"duplicate parameter name {name}")
        names.add(name)
        p.name = name
