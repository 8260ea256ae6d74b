"""Contrastive step loss over action-text candidates, event loss, and their sum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"label outside [0, {n})")
    return dc.neg(dc.mean(dc.pick(dc.log_softmax(logits), labels)))


def similarities(a_tilde: Tensor, bank: Tensor) -> Tensor:
    """Dot products l_j . a_t for every step: (B, T, D) x (T, N, D) -> (B, T, N)."""
    steps = dc.transpose(a_tilde, (1, 0, 2))
    dots = dc.matmul(steps, dc.transpose(bank, (0, 2, 1)))
    return dc.transpose(dots, (1, 0, 2))


def action_loss(dots: Tensor, gt) -> Tensor:
    """Sum over steps of the contrastive step loss, averaged over the batch.

    ``dots`` is (B, T, N) or (T, N); ``gt`` holds ground-truth ids with the
    leading shape of ``dots``.
    """
    if dots.shape[-1] < 2:
        raise ValueError("need at least two candidate actions")
    gt = np.asarray(gt, dtype=np.int64)
    step_nll = dc.neg(dc.pick(dc.log_softmax(dots), gt))
    if step_nll.data.ndim == 1:
        return dc.sum(step_nll)
    return dc.mean(dc.sum(step_nll, axis=1))


@dataclass
class LossReport:
    l_action: Tensor
    l_event: Tensor | None
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "l_action": self.l_action.item(),
            "l_event": self.l_event.item() if self.l_event is not None else 0.0,
            "total": self.total.item(),
        }


def total_loss(l_action: Tensor, l_event: Tensor | None = None) -> LossReport:
    for part in (l_action, l_event):
        if part is not None and not math.isfinite(part.item()):
            raise dc.NonFiniteError("loss component is not finite")
    total = l_action if l_event is None else dc.add(l_action, l_event)
    return LossReport(l_action, l_event, total)
