"""Event-aware prompt generation: infer the event from the boundary states,
classify it, and fold it into the step prompts."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .layers import EncoderLayer, Linear, MLP, Module
from .objective import cross_entropy

VARIANTS = ("concat", "transf")


class EventExtractor(Module):
    """MLP [2*dim -> 64 -> dim] over the concatenated embedded states."""

    def __init__(self, rng: np.random.Generator, dim: int = 128, hidden: int = 64):
        self.mlp = MLP(rng, [2 * dim, hidden, dim])

    def __call__(self, o_s: Tensor, o_g: Tensor) -> Tensor:
        if o_s.shape != o_g.shape:
            raise ValueError(f"state shapes differ: {o_s.shape} vs {o_g.shape}")
        return self.mlp(dc.concat([o_s, o_g], axis=-1))


class ConcatAggregator(Module):
    def __init__(self, rng: np.random.Generator, dim: int = 128):
        self.mlp = MLP(rng, [2 * dim, dim, dim])

    def __call__(self, prompts: Tensor, event: Tensor) -> Tensor:
        b, t, d = prompts.shape
        ev = dc.broadcast_to(dc.reshape(event, (b, 1, d)), (b, t, d))
        return self.mlp(dc.concat([prompts, ev], axis=-1))


class TransfAggregator(Module):
    """One encoder layer over [p_1..p_T, e]; the event token's output is dropped."""

    def __init__(self, rng: np.random.Generator, dim: int = 128, heads: int = 4,
                 ffn_dim: int = 256):
        self.layer = EncoderLayer(rng, dim, heads, ffn_dim)

    def __call__(self, prompts: Tensor, event: Tensor) -> Tensor:
        b, t, d = prompts.shape
        tokens = dc.concat([prompts, dc.reshape(event, (b, 1, d))], axis=1)
        return self.layer(tokens)[:, :t, :]


class EventPromptGenerator(Module):
    def __init__(self, rng: np.random.Generator, n_events: int, dim: int = 128,
                 variant: str = "transf", heads: int = 4, ffn_dim: int = 256):
        if variant not in VARIANTS:
            raise ValueError(f"aggregator variant must be one of {VARIANTS}")
        self.variant = variant
        self.extractor = EventExtractor(rng, dim)
        self.head = Linear(rng, dim, n_events)
        if variant == "concat":
            self.aggregator = ConcatAggregator(rng, dim)
        else:
            self.aggregator = TransfAggregator(rng, dim, heads, ffn_dim)

    def __call__(self, prompts: Tensor, o_s: Tensor, o_g: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (event-aware prompts, event logits)."""
        event = self.extractor(o_s, o_g)
        return self.aggregator(prompts, event), self.head(event)


def extract_event(extractor: EventExtractor, o_s_emb: Tensor, o_g_emb: Tensor) -> Tensor:
    return extractor(o_s_emb, o_g_emb)


def event_loss(head: Linear, event: Tensor, labels) -> Tensor:
    return cross_entropy(head(event), labels)


def aggregate(aggregator, prompts: Tensor, event: Tensor) -> Tensor:
    return aggregator(prompts, event)
