"""Module base class and the reusable layers built on the op set."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, get_default_dtype


class Module:
    """Container that discovers Parameters and sub-Modules among its attributes.

    Parameters carry their full dot-path name from construction, so the census
    order is attribute-insertion order and names never depend on traversal.
    """

    def parameters(self) -> list[Parameter]:
        seen: dict[int, Parameter] = {}
        for p in self._walk():
            seen.setdefault(id(p), p)
        return list(seen.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def _walk(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            yield from _collect(value)

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def num_elements(self, frozen: bool | None = None) -> int:
        return sum(p.size for p in self.parameters() if frozen is None or p.frozen == frozen)


def _collect(value) -> Iterator[Parameter]:
    if isinstance(value, Parameter):
        yield value
    elif isinstance(value, Module):
        yield from value._walk()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _collect(item)


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=get_default_dtype())


def ones(shape) -> np.ndarray:
    return np.ones(shape, dtype=get_default_dtype())


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 std: float = 0.02, zero_init: bool = False):
        w = zeros((d_in, d_out)) if zero_init else normal(rng, (d_in, d_out), std)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", zeros((d_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, name: str, dim: int):
        self.gamma = Parameter(f"{name}.gamma", ones((dim,)))
        self.beta = Parameter(f"{name}.beta", zeros((dim,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(f"{name}.weight", normal(rng, (c_out, c_in, kernel, kernel), math.sqrt(2.0 / fan_in)))
        self.bias = Parameter(f"{name}.bias", zeros((c_out, 1, 1)))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.padding) + self.bias


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate q/k/v/o projections."""

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.wq = Linear(f"{name}.wq", dim, dim, rng)
        self.wk = Linear(f"{name}.wk", dim, dim, rng)
        self.wv = Linear(f"{name}.wv", dim, dim, rng)
        self.wo = Linear(f"{name}.wo", dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        return x.reshape(n, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None,
                 keep_weights: bool = False) -> Tensor:
        context = x if context is None else context
        n, t, d = x.shape
        q = self._split(self.wq(x))
        k = self._split(self.wk(context))
        v = self._split(self.wv(context))
        scores = ops.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // self.heads))
        if mask is not None:
            scores = scores + mask
        weights = ops.softmax(scores, axis=-1)
        if keep_weights:
            self.last_weights = weights.data
        out = ops.matmul(weights, v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.wo(out)


class MLP(Module):
    def __init__(self, name: str, dim: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(f"{name}.fc1", dim, dim * ratio, rng)
        self.fc2 = Linear(f"{name}.fc2", dim * ratio, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


def causal_mask(length: int, dtype=None) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, -inf above."""
    m = np.triu(np.full((length, length), -np.inf), k=1)
    return m.astype(dtype or get_default_dtype())
