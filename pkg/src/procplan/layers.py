"""Parameterised building blocks: linear maps, MLPs, layer norm, attention."""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class Module:
    """Owns named parameter tensors and child modules (attribute order)."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    out.update(child.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _uniform(rng, (d_in, d_out), bound)
        self.bias = _uniform(rng, (d_out,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.add(dc.matmul(x, self.weight), self.bias)


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, rng: np.random.Generator, sizes: list[int]):
        self.layers = [Linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = dc.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.layer_norm(x, self.gamma, self.beta, eps=1e-5)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over (batch, tokens, dim) input.

    ``mask`` is a (tokens, tokens) 0/1 array, rows are queries; it is shared
    by every head and batch item.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.query = Linear(rng, dim, dim)
        self.key = Linear(rng, dim, dim)
        self.value = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        x = dc.reshape(x, (b, n, self.heads, d // self.heads))
        return dc.transpose(x, (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        b, n, d = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(d // self.heads))
        att = dc.softmax(scores) if mask is None else dc.masked_softmax(scores, mask)
        ctx = dc.transpose(dc.matmul(att, v), (0, 2, 1, 3))
        return self.out(dc.reshape(ctx, (b, n, d)))


class EncoderLayer(Module):
    """Pre-norm transformer encoder layer: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ffn_dim: int):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = MLP(rng, [dim, ffn_dim, dim])

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = dc.add(x, self.attn(self.norm1(x), mask))
        return dc.add(x, self.ffn(self.norm2(x)))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates)
    return table
