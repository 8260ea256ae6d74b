"""Synthetic procedure worlds, plan curation, splits, and dataset files.

A world holds events, each owning a small action vocabulary and a Markov
transition matrix over it. Videos are Markov walks; the visual state at
each action boundary blends the event vector with the vectors of the two
neighbouring actions plus isotropic noise.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FEATURE_DIM = 512

_VERBS = [
    "Add", "Pour", "Cut", "Mix", "Melt", "Flip", "Put", "Remove", "Screw", "Unscrew",
    "Spread", "Whisk", "Peel", "Press", "Stir", "Heat", "Fold", "Rinse", "Lift", "Tighten",
    "Loosen", "Season", "Slice", "Brush", "Shake",
]
_NOUNS = [
    "Butter", "Bread", "Egg", "Sugar", "Milk", "Wheel", "Tire", "Jack", "Nut", "Flour",
    "Batter", "Pan", "Lemon", "Ice", "Water", "Oil", "Dough", "Sauce", "Salt", "Jelly",
    "Bolt", "Lid", "Cream", "Cheese", "Tomato",
]
_EVENT_STEMS = [
    "Make Pancakes", "Change a Tire", "Make French Toast", "Make Lemonade", "Build Shelves",
    "Jack Up a Car", "Make Jello Shots", "Grill Steak", "Make Kimchi Rice", "Add Oil to Car",
    "Make Latte", "Make Meringue", "Make Taco Salad", "Make Irish Coffee", "Make Bread and Butter Pickles",
    "Make Banana Ice Cream", "Pickle Cucumbers", "Make Strawberry Cake",
]


class MissingEmbedding(KeyError):
    pass


class EmbeddingProvider:
    """Deterministic string -> 512-d vector map.

    ``pseudo`` mode hashes (seed, string) into a Gaussian draw and normalises
    it; ``file`` mode looks strings up in a loaded table.
    """

    def __init__(self, mode: str = "pseudo", seed: int = 0, dim: int = FEATURE_DIM,
                 table: dict[str, Sequence[float]] | None = None):
        if mode not in ("pseudo", "file"):
            raise ValueError(f"unknown embedding mode {mode!r}")
        if mode == "file" and table is None:
            raise ValueError("file mode needs an embedding table")
        self.mode = mode
        self.seed = seed
        self.dim = dim
        self._table = {k: np.asarray(v, dtype=np.float64) for k, v in (table or {}).items()}
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_file(cls, path: str | Path) -> "EmbeddingProvider":
        table = json.loads(Path(path).read_text())
        dims = {len(v) for v in table.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
        return cls(mode="file", table=table, dim=dims.pop() if dims else FEATURE_DIM)

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed an empty string")
        vec = self._cache.get(text)
        if vec is None:
            if self.mode == "file":
                if text not in self._table:
                    raise MissingEmbedding(text)
                vec = self._table[text]
            else:
                digest = hashlib.sha256(f"{self.seed}\x1f{text}".encode()).digest()
                rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
                vec = rng.standard_normal(self.dim)
                vec /= np.linalg.norm(vec)
            vec.setflags(write=False)
            self._cache[text] = vec
        return vec


def embed_text(provider: EmbeddingProvider, sentence: str) -> np.ndarray:
    return provider.embed(sentence)


@dataclass(frozen=True)
class ActionSpec:
    id: int
    name: str
    event_id: int


@dataclass
class EventSpec:
    id: int
    name: str
    action_ids: list[int]
    transition: np.ndarray  # rows/cols follow action_ids order
    start: np.ndarray

    def local_index(self, action_id: int) -> int:
        return self.action_ids.index(action_id)


@dataclass
class World:
    events: list[EventSpec]
    actions: list[ActionSpec]
    sigma: float = 0.0
    embedding_seed: int = 0
    provider: EmbeddingProvider = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.provider is None:
            self.provider = EmbeddingProvider(seed=self.embedding_seed)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_events(self) -> int:
        return len(self.events)

    def action_names(self) -> list[str]:
        return [a.name for a in self.actions]

    def event_vector(self, event_id: int) -> np.ndarray:
        return self.provider.embed(f"event-state::{self.events[event_id].name}")

    def action_vector(self, action_id: int) -> np.ndarray:
        return self.provider.embed(f"action-state::{self.actions[action_id].name}")

    def dense_transition(self, event_id: int) -> np.ndarray:
        """The event's transition matrix embedded in an N x N array."""
        ev = self.events[event_id]
        out = np.zeros((self.n_actions, self.n_actions))
        out[np.ix_(ev.action_ids, ev.action_ids)] = ev.transition
        return out


@dataclass
class ProcedureVideo:
    event_id: int
    actions: list[int]
    boundary_states: np.ndarray  # (len(actions) + 1, 512)


@dataclass
class PlanInstance:
    o_s: np.ndarray
    o_g: np.ndarray
    gt_actions: tuple[int, ...]
    y_e: int
    video_id: int = -1

    @property
    def T(self) -> int:
        return len(self.gt_actions)


@dataclass
class Dataset:
    world: World
    videos: list[ProcedureVideo]

    def plans(self, T: int) -> list[PlanInstance]:
        out = []
        for vid, video in enumerate(self.videos):
            out.extend(curate_plans(video, T, video_id=vid))
        return out


def _action_names(rng: np.random.Generator, n: int) -> list[str]:
    if n > len(_VERBS) * len(_NOUNS):
        raise ValueError(f"cannot name {n} distinct actions")
    picks = rng.choice(len(_VERBS) * len(_NOUNS), size=n, replace=False)
    return [f"{_VERBS[p // len(_NOUNS)]} {_NOUNS[p % len(_NOUNS)]}" for p in picks]


def _event_names(n: int) -> list[str]:
    return [_EVENT_STEMS[i] if i < len(_EVENT_STEMS) else f"Event {i}" for i in range(n)]


def _sample_transition(rng: np.random.Generator, k: int, determinism: float) -> np.ndarray:
    """Row-stochastic k x k matrix with a dominant successor along a random cycle."""
    if k == 1:
        return np.ones((1, 1))
    order = rng.permutation(k)
    succ = np.empty(k, dtype=int)
    succ[order] = np.roll(order, -1)
    trans = rng.random((k, k))
    np.fill_diagonal(trans, 0.0)
    trans /= trans.sum(axis=1, keepdims=True)
    trans *= 1.0 - determinism
    trans[np.arange(k), succ] += determinism
    return trans / trans.sum(axis=1, keepdims=True)


def gen_world(E: int, N: int, actions_per_event: int, sigma: float, seed: int, *,
              overlap: float = 0.0, determinism: float = 0.9, max_horizon: int = 3,
              transitions: Sequence[np.ndarray] | None = None) -> World:
    """Build a synthetic world of ``E`` events over ``N`` actions.

    Each event owns a disjoint block of ``actions_per_event`` actions. With
    ``overlap > 0`` it additionally borrows that fraction (of its block size)
    of actions owned by other events. ``determinism`` is the probability mass
    each action puts on its canonical successor. ``transitions`` overrides the
    sampled matrices (one per event, over its action list).
    """
    if E < 1 or N < 1 or E * actions_per_event != N:
        raise ValueError(f"infeasible world: E={E}, N={N}, actions_per_event={actions_per_event}")
    if actions_per_event < max_horizon:
        raise ValueError("actions_per_event must be at least the largest horizon")
    if not 0.0 <= overlap <= 1.0 or not 0.0 <= determinism <= 1.0:
        raise ValueError("overlap and determinism must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    names = _action_names(rng, N)
    actions = [ActionSpec(i, names[i], i // actions_per_event) for i in range(N)]

    n_borrow = int(round(overlap * actions_per_event)) if E > 1 else 0
    events = []
    for e, ename in enumerate(_event_names(E)):
        own = list(range(e * actions_per_event, (e + 1) * actions_per_event))
        foreign = [a for a in range(N) if a not in own]
        borrowed = sorted(rng.choice(foreign, size=min(n_borrow, len(foreign)), replace=False).tolist())
        ids = own + borrowed
        k = len(ids)
        if transitions is not None:
            trans = np.asarray(transitions[e], dtype=np.float64)
            if trans.shape != (k, k):
                raise ValueError(f"transition override for event {e} must be {k}x{k}")
            trans = trans / trans.sum(axis=1, keepdims=True)
        else:
            trans = _sample_transition(rng, k, determinism)
        start = rng.dirichlet(np.ones(k))
        events.append(EventSpec(e, ename, ids, trans, start))
    return World(events, actions, sigma=sigma, embedding_seed=seed)


def _boundary_state(world: World, event_id: int, left: int | None, right: int | None,
                    noise: np.ndarray) -> np.ndarray:
    s = world.event_vector(event_id).copy()
    if left is not None:
        s += world.action_vector(left)
    if right is not None:
        s += world.action_vector(right)
    s += world.sigma * noise
    return s / np.linalg.norm(s)


def sample_video(world: World, event_id: int, L: int, rng: np.random.Generator) -> ProcedureVideo:
    if not 0 <= event_id < world.n_events:
        raise KeyError(f"unknown event {event_id}")
    if L < 1:
        raise ValueError("video length must be positive")
    ev = world.events[event_id]
    local = [rng.choice(len(ev.action_ids), p=ev.start)]
    for _ in range(L - 1):
        local.append(rng.choice(len(ev.action_ids), p=ev.transition[local[-1]]))
    acts = [ev.action_ids[i] for i in local]
    noise = rng.standard_normal((L + 1, world.provider.dim))
    states = np.stack([
        _boundary_state(world, event_id, acts[k - 1] if k > 0 else None,
                        acts[k] if k < L else None, noise[k])
        for k in range(L + 1)
    ])
    return ProcedureVideo(event_id, acts, states)


def sample_videos(world: World, n_videos: int, length: int | tuple[int, int],
                  rng: np.random.Generator) -> list[ProcedureVideo]:
    """Videos with events assigned round-robin; ``length`` may be a (lo, hi) range."""
    videos = []
    for i in range(n_videos):
        L = length if isinstance(length, int) else int(rng.integers(length[0], length[1] + 1))
        videos.append(sample_video(world, i % world.n_events, L, rng))
    return videos


def curate_plans(video: ProcedureVideo, T: int, video_id: int = -1) -> list[PlanInstance]:
    """Shift a length-T window over the video; one plan per offset."""
    L = len(video.actions)
    return [
        PlanInstance(video.boundary_states[i], video.boundary_states[i + T],
                     tuple(video.actions[i:i + T]), video.event_id, video_id)
        for i in range(L - T + 1)
    ]


def split_dataset(instances: Sequence[PlanInstance], ratio: float = 0.7, seed: int = 0
                  ) -> tuple[list[PlanInstance], list[PlanInstance]]:
    """Split by source video so no video contributes windows to both sides."""
    if not instances:
        raise ValueError("nothing to split")
    vids = sorted({p.video_id for p in instances})
    order = np.random.default_rng(seed).permutation(len(vids))
    n_train = int(round(ratio * len(vids)))
    train_ids = {vids[i] for i in order[:n_train]}
    train = [p for p in instances if p.video_id in train_ids]
    test = [p for p in instances if p.video_id not in train_ids]
    return train, test


# -- files ---------------------------------------------------------------------

def world_to_dict(world: World) -> dict:
    return {
        "events": [
            {"id": e.id, "name": e.name, "action_ids": list(e.action_ids),
             "transition": e.transition.tolist(), "start": e.start.tolist()}
            for e in world.events
        ],
        "actions": [{"id": a.id, "name": a.name, "event_id": a.event_id} for a in world.actions],
        "sigma": world.sigma,
        "embedding_seed": world.embedding_seed,
    }


def world_from_dict(d: dict, provider: EmbeddingProvider | None = None) -> World:
    events = [EventSpec(e["id"], e["name"], list(e["action_ids"]),
                        np.asarray(e["transition"], dtype=np.float64),
                        np.asarray(e["start"], dtype=np.float64)) for e in d["events"]]
    actions = [ActionSpec(a["id"], a["name"], a["event_id"]) for a in d["actions"]]
    seed = d.get("embedding_seed", 0)
    return World(events, actions, sigma=d.get("sigma", 0.0), embedding_seed=seed,
                 provider=provider or EmbeddingProvider(seed=seed))


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "world": world_to_dict(ds.world),
        "videos": [{"event_id": v.event_id, "actions": list(map(int, v.actions)),
                    "boundary_states": v.boundary_states.tolist()} for v in ds.videos],
    }


def dataset_from_dict(d: dict, provider: EmbeddingProvider | None = None) -> Dataset:
    world = world_from_dict(d["world"], provider)
    videos = []
    for v in d["videos"]:
        states = np.asarray(v["boundary_states"], dtype=np.float64)
        if states.shape[0] != len(v["actions"]) + 1:
            raise ValueError("each video needs exactly one more boundary state than actions")
        videos.append(ProcedureVideo(v["event_id"], list(v["actions"]), states))
    return Dataset(world, videos)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    # json writes floats with repr, which round-trips float64 exactly
    Path(path).write_text(json.dumps(dataset_to_dict(ds)))


def load_dataset(path: str | Path, embedding_table: str | Path | None = None) -> Dataset:
    """Load a dataset file; pass ``embedding_table`` to use file-mode text embeddings."""
    provider = EmbeddingProvider.from_file(embedding_table) if embedding_table else None
    return dataset_from_dict(json.loads(Path(path).read_text()), provider)


def make_dataset(E: int = 4, N: int = 20, actions_per_event: int = 5, sigma: float = 0.1,
                 seed: int = 0, n_videos: int = 400, video_length: int | tuple[int, int] = 8,
                 **world_kwargs) -> Dataset:
    world = gen_world(E, N, actions_per_event, sigma, seed, **world_kwargs)
    rng = np.random.default_rng([seed, 1])
    return Dataset(world, sample_videos(world, n_videos, video_length, rng))
