"""Masked self-attention refinement of action tokens and its attention masks."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .layers import LayerNorm, MLP, Module, MultiHeadAttention

# incremented on every probabilistic mask draw; evaluation asserts it is unchanged
sample_counter = {"drop_relation": 0}


def deterministic_mask(T: int) -> np.ndarray:
    if T < 2:
        raise ValueError("relation masks need T >= 2")
    return 1.0 - np.eye(T)


def drop_relation_mask(T: int, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each off-diagonal entry with probability ``tau``.

    A row left without any 1 gets one off-diagonal entry re-enabled at
    random, so at most T-2 of its T-1 relations are dropped.
    """
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"drop rate must lie in [0, 1), got {tau}")
    mask = deterministic_mask(T)
    sample_counter["drop_relation"] += 1
    alpha = rng.random((T, T))
    mask[alpha < tau] = 0.0
    np.fill_diagonal(mask, 0.0)
    for i in np.flatnonzero(mask.sum(axis=1) == 0):
        others = [j for j in range(T) if j != i]
        mask[i, others[rng.integers(len(others))]] = 1.0
    return mask


class ArmStack(Module):
    """Masked attention layers (no inner residual) followed by an FFN."""

    def __init__(self, rng: np.random.Generator, dim: int = 128, heads: int = 4,
                 layers: int = 2, ffn_dim: int = 256):
        self.norms = [LayerNorm(dim) for _ in range(layers)]
        self.attn = [MultiHeadAttention(rng, dim, heads) for _ in range(layers)]
        self.ffn = MLP(rng, [dim, ffn_dim, dim])

    def __call__(self, a_hat: Tensor, mask: np.ndarray) -> Tensor:
        x = a_hat
        for norm, attn in zip(self.norms, self.attn):
            x = attn(norm(x), mask)
        return self.ffn(x)


def arm_forward(stack: ArmStack, a_hat: Tensor, mask: np.ndarray) -> Tensor:
    return stack(a_hat, mask)


def refine(a_hat: Tensor, a_check: Tensor) -> Tensor:
    if a_hat.shape != a_check.shape:
        raise ValueError(f"token shapes differ: {a_hat.shape} vs {a_check.shape}")
    return dc.add(a_hat, a_check)
