"""Order/action prompt sentences and per-step candidate banks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .data import EmbeddingProvider, World

TEMPLATE = "{order}, this action is to {action}"
ACTION_BLANK = "[action]"
MAX_HORIZON = 6

_ORDINALS = {1: "Firstly", 2: "Secondly", 3: "Thirdly", 4: "Fourthly", 5: "Fifthly", 6: "Sixthly"}


def ordinal(t: int) -> str:
    if t not in _ORDINALS:
        raise ValueError(f"step {t} outside 1..{MAX_HORIZON}")
    return _ORDINALS[t]


def input_prompt(t: int) -> str:
    return TEMPLATE.format(order=ordinal(t), action=ACTION_BLANK)


def supervision_text(t: int, action_name: str, known: Sequence[str] | None = None) -> str:
    if not action_name or (known is not None and action_name not in known):
        raise KeyError(f"unknown action {action_name!r}")
    return TEMPLATE.format(order=ordinal(t), action=action_name)


def prompt_features(provider: EmbeddingProvider, T: int) -> np.ndarray:
    """Raw (T, 512) features of the input prompts for steps 1..T."""
    return np.stack([provider.embed(input_prompt(t)) for t in range(1, T + 1)])


def bank_features(world: World, T: int) -> np.ndarray:
    """Raw (T, N, 512) features of every filled sentence, step by step."""
    names = world.action_names()
    return np.stack([
        np.stack([world.provider.embed(supervision_text(t, n)) for n in names])
        for t in range(1, T + 1)
    ])


@dataclass
class ActionBank:
    step: int
    vectors: dc.Tensor  # (N, dim)
    gt_index: int | None = None


def build_bank(world: World, t: int, text_mlp: Callable[[dc.Tensor], dc.Tensor],
               gt_plan: Sequence[int] | None = None) -> ActionBank:
    raw = np.stack([world.provider.embed(supervision_text(t, n)) for n in world.action_names()])
    gt = None
    if gt_plan is not None:
        gt = int(gt_plan[t - 1])
        if not 0 <= gt < world.n_actions:
            raise ValueError(f"ground-truth action {gt} out of range")
    return ActionBank(t, text_mlp(dc.Tensor(raw)), gt)
