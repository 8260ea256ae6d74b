"""The full planner: embeddings, event-aware prompts, backbone, relation mining."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .arm import ArmStack, deterministic_mask, refine
from .backbone import Backbone, assemble, feature_mlp
from .diffcore import Tensor
from .epg import EventPromptGenerator
from .layers import Module
from .objective import LossReport, action_loss, cross_entropy, similarities, total_loss
from .prompts import MAX_HORIZON

TEXT_MODES = ("pseudo_clip", "learnable_tokens")


@dataclass(frozen=True)
class Architecture:
    n_actions: int
    n_events: int
    horizon: int
    dim: int = 128
    feature_dim: int = 512
    epg_enabled: bool = True
    epg_variant: str = "transf"
    arm_enabled: bool = True
    arm_layers: int = 2
    backbone_layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    text_mode: str = "pseudo_clip"


@dataclass
class Output:
    a_tilde: Tensor            # (B, T, D)
    dots: Tensor               # (B, T, N)
    event_logits: Tensor | None


class Planner(Module):
    """Maps (o_s, o_g) raw features to per-step action similarities.

    ``prompt_raw`` (T, 512) and ``bank_raw`` (T, N, 512) are the fixed text
    encoder features; they are unused in learnable-token mode.
    """

    def __init__(self, arch: Architecture, rng: np.random.Generator,
                 prompt_raw: np.ndarray | None = None, bank_raw: np.ndarray | None = None):
        if arch.text_mode not in TEXT_MODES:
            raise ValueError(f"text_mode must be one of {TEXT_MODES}")
        if not 2 <= arch.horizon <= MAX_HORIZON:
            raise ValueError(f"horizon must lie in 2..{MAX_HORIZON}")
        self.arch = arch
        d = arch.dim
        self.visual = feature_mlp(rng, arch.feature_dim, 2 * d, d)
        if arch.text_mode == "pseudo_clip":
            self.text = feature_mlp(rng, arch.feature_dim, 2 * d, d)
            if prompt_raw is None or bank_raw is None:
                raise ValueError("pseudo_clip mode needs prompt and bank features")
            self.prompt_raw = np.asarray(prompt_raw, dtype=np.float64)
            self.bank_raw = np.asarray(bank_raw, dtype=np.float64)
        else:
            self.prompt_tokens = Tensor(rng.normal(0.0, d ** -0.5, (arch.horizon, d)), requires_grad=True)
            self.action_tokens = Tensor(rng.normal(0.0, d ** -0.5, (arch.n_actions, d)), requires_grad=True)
        if arch.epg_enabled:
            self.epg = EventPromptGenerator(rng, arch.n_events, d, arch.epg_variant,
                                            arch.heads, arch.ffn_dim)
        self.backbone = Backbone(rng, d, arch.backbone_layers, arch.heads, arch.ffn_dim)
        if arch.arm_enabled:
            self.arm = ArmStack(rng, d, arch.heads, arch.arm_layers, arch.ffn_dim)

    def prompts_and_bank(self) -> tuple[Tensor, Tensor]:
        T, N, d = self.arch.horizon, self.arch.n_actions, self.arch.dim
        if self.arch.text_mode == "pseudo_clip":
            prompts = self.text(Tensor(self.prompt_raw))
            bank = self.text(Tensor(self.bank_raw))
        else:
            prompts = self.prompt_tokens
            bank = dc.broadcast_to(dc.reshape(self.action_tokens, (1, N, d)), (T, N, d))
        return prompts, bank

    def __call__(self, o_s, o_g, mask: np.ndarray | None = None) -> Output:
        """Forward pass; ``mask=None`` uses the deterministic relation mask."""
        o_s, o_g = dc.as_tensor(o_s), dc.as_tensor(o_g)
        b = o_s.shape[0]
        T, d = self.arch.horizon, self.arch.dim
        s_emb, g_emb = self.visual(o_s), self.visual(o_g)
        prompts, bank = self.prompts_and_bank()
        prompts = dc.broadcast_to(dc.reshape(prompts, (1, T, d)), (b, T, d))
        event_logits = None
        if self.arch.epg_enabled:
            prompts, event_logits = self.epg(prompts, s_emb, g_emb)
        a_hat = self.backbone.extract_features(assemble(s_emb, prompts, g_emb))
        a_tilde = a_hat
        if self.arch.arm_enabled:
            a_tilde = refine(a_hat, self.arm(a_hat, deterministic_mask(T) if mask is None else mask))
        return Output(a_tilde, similarities(a_tilde, bank), event_logits)

    def loss(self, o_s, o_g, gt, events, mask: np.ndarray | None = None) -> tuple[LossReport, Output]:
        out = self(o_s, o_g, mask)
        l_event = cross_entropy(out.event_logits, events) if out.event_logits is not None else None
        return total_loss(action_loss(out.dots, gt), l_event), out
