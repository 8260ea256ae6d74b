"""Step distributions, Viterbi decoding with a transition prior, and metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import log_softmax


def step_distributions(dots: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over candidate actions: (..., T, N) -> same shape."""
    return log_softmax(np.asarray(dots, dtype=np.float64), axis=-1)


def estimate_transition(plans: Sequence[Sequence[int]], n_actions: int, smoothing: float = 1.0) -> np.ndarray:
    """Row-normalised counts of successive ground-truth pairs plus ``smoothing`` per cell.

    Rows with no counts and zero smoothing fall back to uniform.
    """
    counts = np.full((n_actions, n_actions), float(smoothing))
    for plan in plans:
        for a, b in zip(plan[:-1], plan[1:]):
            counts[a, b] += 1.0
    sums = counts.sum(axis=1, keepdims=True)
    empty = sums[:, 0] == 0
    counts[empty] = 1.0
    sums[empty] = n_actions
    return counts / sums


def viterbi(logdists: np.ndarray, prior: np.ndarray) -> list[int]:
    """Most probable action sequence under per-step log-probs and a transition prior.

    Ties resolve toward the lower action id.
    """
    logdists = np.asarray(logdists, dtype=np.float64)
    T, N = logdists.shape
    if prior.shape != (N, N):
        raise ValueError(f"prior shape {prior.shape} does not match {N} actions")
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior)
    score = logdists[0].copy()
    back = np.zeros((T, N), dtype=np.int64)
    for t in range(1, T):
        cand = score[:, None] + log_prior          # (prev, next)
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(N)] + logdists[t]
    path = [int(np.argmax(score))]
    for t in range(T - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1]


# -- metrics ---------------------------------------------------------------------

def success_rate(preds, gts) -> float:
    preds, gts = np.asarray(preds), np.asarray(gts)
    return float(np.mean(np.all(preds == gts, axis=1))) if len(gts) else 0.0


def mean_accuracy(preds, gts) -> float:
    preds, gts = np.asarray(preds), np.asarray(gts)
    return float(np.mean(preds == gts)) if len(gts) else 0.0


def mean_iou(preds, gts, granularity: str = "plan") -> float:
    """Set overlap of predicted and true actions.

    ``plan`` averages per-plan IoUs; ``pooled`` divides summed intersections
    by summed unions over all plans.
    """
    inter, union = [], []
    for p, g in zip(preds, gts):
        sp, sg = set(map(int, p)), set(map(int, g))
        inter.append(len(sp & sg))
        union.append(len(sp | sg))
    if not union:
        return 0.0
    if granularity == "plan":
        return float(np.mean(np.divide(inter, union)))
    if granularity == "pooled":
        return float(np.sum(inter) / np.sum(union))
    raise ValueError(f"unknown granularity {granularity!r}")


def is_event_conflict(pred: Sequence[int], event_actions: Sequence[set[int]]) -> bool:
    acts = set(map(int, pred))
    return not any(acts <= ev for ev in event_actions)


def event_conflict_rate(preds, event_actions: Sequence[Sequence[int]]) -> float:
    """Fraction of predictions whose actions no single event covers."""
    sets = [set(map(int, ev)) for ev in event_actions]
    if not len(preds):
        return 0.0
    return float(np.mean([is_event_conflict(p, sets) for p in preds]))


def transition_matrix(sequences, action_ids: Sequence[int]) -> np.ndarray:
    """Row-normalised successive-pair counts restricted to ``action_ids``; empty rows stay 0."""
    index = {a: i for i, a in enumerate(action_ids)}
    n = len(action_ids)
    counts = np.zeros((n, n))
    for seq in sequences:
        for a, b in zip(seq[:-1], seq[1:]):
            if a in index and b in index:
                counts[index[a], index[b]] += 1.0
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


def absolute_error(learned: np.ndarray, truth: np.ndarray) -> float:
    return float(np.abs(np.asarray(learned) - np.asarray(truth)).sum())


@dataclass
class TransitionAnalysis:
    learned: dict[int, np.ndarray]
    truth: dict[int, np.ndarray]
    ae: dict[int, float]
    mae: float


def transition_analysis(pred_seqs, gt_seqs, seq_events, event_actions: Mapping[int, Sequence[int]],
                        truth: Mapping[int, np.ndarray] | None = None) -> TransitionAnalysis:
    """Per-event learned vs ground-truth transition matrices and their AE/mAE.

    The learned matrix of an event is counted from the predictions for that
    event's instances. Without ``truth`` the reference matrix is counted the
    same way from the ground-truth sequences.
    """
    learned, ref, ae = {}, {}, {}
    seq_events = np.asarray(seq_events)
    for e, ids in event_actions.items():
        sel = np.flatnonzero(seq_events == e)
        learned[e] = transition_matrix([pred_seqs[i] for i in sel], ids)
        if truth is not None:
            ref[e] = np.asarray(truth[e], dtype=np.float64)
        else:
            ref[e] = transition_matrix([gt_seqs[i] for i in sel], ids)
        ae[e] = absolute_error(learned[e], ref[e])
    return TransitionAnalysis(learned, ref, ae, float(np.mean(list(ae.values()))) if ae else 0.0)


@dataclass
class EvalReport:
    sr: float
    macc: float
    miou: float
    miou_pooled: float
    event_conflict_rate: float
    ae: dict[int, float] = field(default_factory=dict)
    mae: float = 0.0
    event_accuracy: float | None = None
    n: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ae"] = {str(k): v for k, v in self.ae.items()}
        return d

    def table(self) -> str:
        rows = [("SR", self.sr), ("mAcc", self.macc), ("mIoU", self.miou),
                ("mIoU (pooled)", self.miou_pooled),
                ("event conflict", self.event_conflict_rate), ("mAE", self.mae)]
        if self.event_accuracy is not None:
            rows.append(("event acc", self.event_accuracy))
        rows += [(f"AE event {k}", v) for k, v in sorted(self.ae.items())]
        width = max(len(name) for name, _ in rows)
        lines = [f"{'metric':<{width}}  {'value':>8}", f"{'-' * width}  {'-' * 8}"]
        lines += [f"{name:<{width}}  {value:>8.4f}" for name, value in rows]
        lines.append(f"{'instances':<{width}}  {self.n:>8d}")
        return "\n".join(lines)


def build_report(preds, gts, seq_events, event_actions: Mapping[int, Sequence[int]],
                 event_accuracy: float | None = None,
                 truth: Mapping[int, np.ndarray] | None = None) -> EvalReport:
    ta = transition_analysis(preds, gts, seq_events, event_actions, truth)
    return EvalReport(
        sr=success_rate(preds, gts),
        macc=mean_accuracy(preds, gts),
        miou=mean_iou(preds, gts, "plan"),
        miou_pooled=mean_iou(preds, gts, "pooled"),
        event_conflict_rate=event_conflict_rate(preds, list(event_actions.values())),
        ae=ta.ae, mae=ta.mae, event_accuracy=event_accuracy, n=len(gts),
    )
