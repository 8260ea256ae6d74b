"""Feature embedding MLPs and the transformer that produces action tokens."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .layers import EncoderLayer, LayerNorm, MLP, Module, sinusoidal_positions


def feature_mlp(rng: np.random.Generator, d_in: int = 512, hidden: int = 256, d_out: int = 128) -> MLP:
    return MLP(rng, [d_in, hidden, d_out])


def assemble(o_s: Tensor, prompts: Tensor, o_g: Tensor) -> Tensor:
    """Token sequence [o_s, p_1..p_T, o_g] of shape (B, T+2, D)."""
    b, t, d = prompts.shape
    if o_s.shape != (b, d) or o_g.shape != (b, d):
        raise ValueError(f"state shapes {o_s.shape}, {o_g.shape} do not match prompts {prompts.shape}")
    return dc.concat([dc.reshape(o_s, (b, 1, d)), prompts, dc.reshape(o_g, (b, 1, d))], axis=1)


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, dim: int = 128, layers: int = 2,
                 heads: int = 4, ffn_dim: int = 256):
        self.layers = [EncoderLayer(rng, dim, heads, ffn_dim) for _ in range(layers)]
        self.norm = LayerNorm(dim)

    def __call__(self, q: Tensor) -> Tensor:
        x = dc.add(q, sinusoidal_positions(q.shape[1], q.shape[2]))
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)

    def extract_features(self, q: Tensor) -> Tensor:
        """Middle T outputs; the two boundary-state tokens are discarded."""
        return self(q)[:, 1:-1, :]
