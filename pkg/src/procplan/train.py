"""Training loop, Adam, checkpoints, evaluation, and ablation sweeps."""
from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

from . import arm as arm_mod
from . import diffcore as dc
from .data import Dataset, PlanInstance, split_dataset
from .decode import EvalReport, build_report, estimate_transition, step_distributions, viterbi
from .model import Architecture, Planner
from .prompts import bank_features, prompt_features

log = logging.getLogger(__name__)

STREAMS = ("world", "split", "init", "dropmask", "shuffle")


class ArchitectureMismatch(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 7e-4
    weight_decay: float = 0.4
    decoupled_weight_decay: bool = True
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    split_seed: int = 0
    horizon: int = 3
    drop_rate: float = 0.2
    epg_variant: str = "transf"
    epg_enabled: bool = True
    arm_enabled: bool = True
    arm_layers: int = 2
    text_mode: str = "pseudo_clip"
    backbone_layers: int = 2
    backbone_heads: int = 4
    backbone_ffn_dim: int = 256
    hidden: int = 128
    split_ratio: float = 0.7
    val_fraction: float = 0.1
    transition_smoothing: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Accepts flat keys, dotted keys (``epg.variant``) or nested sections."""
        flat: dict = {}

        def walk(prefix: str, obj: dict):
            for k, v in obj.items():
                key = f"{prefix}_{k}" if prefix else k
                if isinstance(v, dict):
                    walk(key, v)
                else:
                    flat[key.replace(".", "_")] = v

        walk("", d)
        aliases = {"backbone_heads": "backbone_heads", "arm_drop_rate": "drop_rate",
                   "T": "horizon", "backbone_ffn": "backbone_ffn_dim"}
        flat = {aliases.get(k, k): v for k, v in flat.items()}
        known = {f.name for f in fields(cls)}
        unknown = set(flat) - known - {"arm_mask_share"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if flat.get("arm_mask_share", "per_batch") != "per_batch":
            raise ValueError("only per_batch mask sharing is supported")
        flat.pop("arm_mask_share", None)
        return cls(**flat)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def architecture(self, n_actions: int, n_events: int) -> Architecture:
        return Architecture(
            n_actions=n_actions, n_events=n_events, horizon=self.horizon, dim=self.hidden,
            epg_enabled=self.epg_enabled, epg_variant=self.epg_variant,
            arm_enabled=self.arm_enabled, arm_layers=self.arm_layers,
            backbone_layers=self.backbone_layers, heads=self.backbone_heads,
            ffn_dim=self.backbone_ffn_dim, text_mode=self.text_mode,
        )


def substreams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one master seed."""
    return {name: np.random.default_rng([seed, i]) for i, name in enumerate(STREAMS)}


# -- optimiser -------------------------------------------------------------------

@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(param, grad, m, v, lr, wd, beta1, beta2, eps, c1, c2, decoupled):
    shrink = 1.0 - lr * wd if decoupled else 1.0
    for i in range(param.size):
        g = grad[i]
        if not decoupled:
            g += wd * param[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        param[i] = param[i] * shrink - (lr / c1) * m[i] / (np.sqrt(v[i] / c2) + eps)


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, wd: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, decoupled: bool = False):
    """One bias-corrected Adam update of ``param``, ``m`` and ``v`` in place.

    Coupled weight decay adds ``wd * param`` to the gradient before the
    moment update; decoupled decay shrinks the parameter directly.
    Returns (param, m, v).
    """
    arrays = (param, grad, m, v)
    if any(a.shape != param.shape for a in arrays):
        raise ValueError("parameter, gradient and moment shapes must agree")
    if not all(a.flags.c_contiguous and a.dtype == np.float64 for a in arrays):
        raise ValueError("adam_step needs contiguous float64 arrays")
    flat = [a.reshape(-1) for a in arrays]
    _adam_kernel(*flat, float(lr), float(wd), beta1, beta2, eps,
                 1 - beta1 ** t, 1 - beta2 ** t, bool(decoupled and wd))
    return param, m, v


class Adam:
    """Adam over one flat buffer; parameter data and grads become views into it."""

    def __init__(self, params: dict[str, dc.Tensor], lr: float, weight_decay: float = 0.0,
                 decoupled: bool = False):
        self.params = params
        self.lr, self.weight_decay, self.decoupled = lr, weight_decay, decoupled
        total = sum(p.data.size for p in params.values())
        self.flat = np.empty(total)
        self.flat_grad = np.zeros(total)
        self.flat_m = np.zeros(total)
        self.flat_v = np.zeros(total)
        self.m, self.v = {}, {}
        offset = 0
        for k, p in params.items():
            n, shape = p.data.size, p.data.shape
            sl = slice(offset, offset + n)
            self.flat[sl] = p.data.reshape(-1)
            p.data = self.flat[sl].reshape(shape)
            p.grad = self.flat_grad[sl].reshape(shape)
            self.m[k] = self.flat_m[sl].reshape(shape)
            self.v[k] = self.flat_v[sl].reshape(shape)
            offset += n
        self.t = 0

    def zero_grad(self) -> None:
        self.flat_grad.fill(0.0)

    def step(self) -> None:
        self.t += 1
        adam_step(self.flat, self.flat_grad, self.flat_m, self.flat_v, self.t, self.lr,
                  self.weight_decay, decoupled=self.decoupled)


# -- data plumbing -----------------------------------------------------------------

@dataclass
class Splits:
    train: list[PlanInstance]
    val: list[PlanInstance]
    test: list[PlanInstance]

    def get(self, name: str) -> list[PlanInstance]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def make_splits(dataset: Dataset, config: TrainConfig) -> Splits:
    plans = dataset.plans(config.horizon)
    if not plans:
        raise ValueError(f"no video is long enough for horizon {config.horizon}")
    train, test = split_dataset(plans, config.split_ratio, seed=config.split_seed)
    val: list[PlanInstance] = []
    if config.val_fraction > 0:
        train, val = split_dataset(train, 1.0 - config.val_fraction, seed=config.split_seed + 1)
    return Splits(train, val, test)


def _stack(batch: Sequence[PlanInstance]):
    return (np.stack([p.o_s for p in batch]), np.stack([p.o_g for p in batch]),
            np.array([p.gt_actions for p in batch], dtype=np.int64),
            np.array([p.y_e for p in batch], dtype=np.int64))


def build_model(config: TrainConfig, dataset: Dataset, rng: np.random.Generator) -> Planner:
    world = dataset.world
    arch = config.architecture(world.n_actions, world.n_events)
    if config.text_mode == "pseudo_clip":
        return Planner(arch, rng, prompt_features(world.provider, config.horizon),
                       bank_features(world, config.horizon))
    return Planner(arch, rng)


# -- evaluation --------------------------------------------------------------------

@dataclass
class Predictions:
    preds: list[list[int]]
    gts: list[list[int]]
    events: list[int]
    logdists: np.ndarray
    event_pred: np.ndarray | None

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for i, (p, g, e) in enumerate(zip(self.preds, self.gts, self.events)):
                fh.write(json.dumps({"gt": g, "pred": p, "event": e,
                                     "logdists": self.logdists[i].tolist()}) + "\n")


def load_predictions(path: str | Path) -> Predictions:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    return Predictions([r["pred"] for r in rows], [r["gt"] for r in rows],
                       [r["event"] for r in rows], np.array([r["logdists"] for r in rows]), None)


def predict(model: Planner, plans: Sequence[PlanInstance], prior: np.ndarray,
            batch_size: int = 256) -> Predictions:
    """Deterministic-mask forward pass plus Viterbi decoding.

    Raises if any probabilistic relation mask is drawn while predicting.
    """
    before = arm_mod.sample_counter["drop_relation"]
    logdists, event_logits = [], []
    for i in range(0, len(plans), batch_size):
        o_s, o_g, _, _ = _stack(plans[i:i + batch_size])
        out = model(o_s, o_g, mask=None)
        logdists.append(step_distributions(out.dots.data))
        if out.event_logits is not None:
            event_logits.append(out.event_logits.data)
    if arm_mod.sample_counter["drop_relation"] != before:
        raise AssertionError("a probabilistic relation mask was sampled during inference")
    ld = np.concatenate(logdists) if logdists else np.zeros((0, model.arch.horizon, model.arch.n_actions))
    preds = [viterbi(row, prior) for row in ld]
    ev = np.concatenate(event_logits).argmax(axis=1) if event_logits else None
    return Predictions(preds, [list(p.gt_actions) for p in plans], [p.y_e for p in plans], ld, ev)


def report_from_predictions(pred: Predictions, world, use_generator_truth: bool = True) -> EvalReport:
    event_actions = {e.id: e.action_ids for e in world.events}
    truth = {e.id: e.transition for e in world.events} if use_generator_truth else None
    acc = None
    if pred.event_pred is not None and len(pred.events):
        acc = float(np.mean(pred.event_pred == np.asarray(pred.events)))
    return build_report(pred.preds, pred.gts, pred.events, event_actions, acc, truth)


# -- training ----------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    l_action: float
    l_event: float
    total: float
    train_sr: float
    val_sr: float | None
    seconds: float


class Trainer:
    """Owns the model, optimiser and rng streams for one training run."""

    def __init__(self, config: TrainConfig, dataset: Dataset, splits: Splits | None = None):
        self.config = config
        self.dataset = dataset
        self.splits = splits or make_splits(dataset, config)
        if not self.splits.train:
            raise ValueError("empty training split")
        if any(p.T != config.horizon for p in self.splits.train):
            raise ValueError("dataset horizon does not match config.horizon")
        self.rngs = substreams(config.seed)
        self.model = build_model(config, dataset, self.rngs["init"])
        self.params = self.model.named_parameters()
        self.opt = Adam(self.params, config.lr, config.weight_decay, config.decoupled_weight_decay)
        self.prior = estimate_transition([p.gt_actions for p in self.splits.train],
                                         dataset.world.n_actions, config.transition_smoothing)
        self.epoch = 0
        self.best_val_sr = -1.0
        self.best_state: dict[str, np.ndarray] | None = None
        self.history: list[EpochLog] = []

    # one pass over the training split
    def train_epoch(self) -> EpochLog:
        cfg = self.config
        start = time.perf_counter()
        order = self.rngs["shuffle"].permutation(len(self.splits.train))
        sums = np.zeros(3)
        hits = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [self.splits.train[i] for i in order[b0:b0 + cfg.batch_size]]
            o_s, o_g, gt, ev = _stack(batch)
            mask = None
            if cfg.arm_enabled:
                mask = arm_mod.drop_relation_mask(cfg.horizon, cfg.drop_rate, self.rngs["dropmask"])
            self.opt.zero_grad()
            with dc.Tape() as tape:
                try:
                    report, out = self.model.loss(o_s, o_g, gt, ev, mask)
                except dc.NonFiniteError as exc:
                    raise TrainingDiverged(f"non-finite value at epoch {self.epoch + 1}, batch {b0 // cfg.batch_size}") from exc
            tape.backward(report.total)
            self.opt.step()
            parts = report.as_floats()
            sums += np.array([parts["l_action"], parts["l_event"], parts["total"]]) * len(batch)
            hits += int(np.all(out.dots.data.argmax(axis=-1) == gt, axis=1).sum())
        self.epoch += 1
        n = len(order)
        val_sr = None
        if self.splits.val:
            val_sr = float(np.mean([p == g for p, g in zip(*self._val_predict())]))
            if val_sr > self.best_val_sr:
                self.best_val_sr = val_sr
                self.best_state = self.state_arrays()
        entry = EpochLog(self.epoch, *(sums / n), hits / n, val_sr, time.perf_counter() - start)
        self.history.append(entry)
        return entry

    def _val_predict(self):
        pred = predict(self.model, self.splits.val, self.prior)
        return pred.preds, pred.gts

    def run(self, until: int | None = None, metrics_path: str | Path | None = None) -> list[EpochLog]:
        until = self.config.epochs if until is None else min(until, self.config.epochs)
        while self.epoch < until:
            entry = self.train_epoch()
            log.info("epoch %d total %.4f train_sr %.3f val_sr %s", entry.epoch, entry.total,
                     entry.train_sr, entry.val_sr)
            if metrics_path is not None:
                with open(metrics_path, "a") as fh:
                    fh.write(json.dumps(asdict(entry)) + "\n")
        return self.history

    def evaluate(self, split: str = "test") -> EvalReport:
        return evaluate_model(self.model, self.splits.get(split), self.prior, self.dataset.world)

    # -- persistence -------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data.copy() for k, p in self.params.items()}
        out.update({f"adam_m/{k}": m.copy() for k, m in self.opt.m.items()})
        out.update({f"adam_v/{k}": v.copy() for k, v in self.opt.v.items()})
        out["prior"] = self.prior.copy()
        return out

    def save(self, path: str | Path, arrays: dict[str, np.ndarray] | None = None) -> Path:
        meta = {
            "epoch": self.epoch,
            "adam_step": self.opt.t,
            "best_val_sr": self.best_val_sr,
            "rng_state": {k: g.bit_generator.state for k, g in self.rngs.items()},
        }
        return save_checkpoint(path, self.config, arrays or self.state_arrays(), meta)

    @classmethod
    def load(cls, path: str | Path, dataset: Dataset, config: TrainConfig | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        cfg = config or ckpt.config
        trainer = cls(cfg, dataset)
        trainer.restore(ckpt)
        return trainer

    def restore(self, ckpt: "Checkpoint") -> None:
        _load_params(self.params, ckpt.arrays)
        for k in self.params:
            self.opt.m[k][...] = ckpt.arrays[f"adam_m/{k}"]
            self.opt.v[k][...] = ckpt.arrays[f"adam_v/{k}"]
        self.opt.t = ckpt.meta["adam_step"]
        self.prior = ckpt.arrays["prior"].copy()
        self.epoch = ckpt.meta["epoch"]
        self.best_val_sr = ckpt.meta["best_val_sr"]
        for k, g in self.rngs.items():
            g.bit_generator.state = ckpt.meta["rng_state"][k]


def evaluate_model(model: Planner, plans: Sequence[PlanInstance], prior: np.ndarray, world) -> EvalReport:
    return report_from_predictions(predict(model, plans, prior), world)


# -- checkpoint files ------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, config: TrainConfig, arrays: dict[str, np.ndarray],
                    meta: dict) -> Path:
    """JSON manifest plus a little-endian float64 blob alongside it."""
    path = Path(path)
    blob = path.with_suffix(".bin")
    tensors, offset = {}, 0
    with open(blob, "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(arr.tobytes())
            tensors[name] = {"shape": list(arr.shape), "data_file": blob.name, "offset": offset}
            offset += arr.nbytes
    manifest = {"config": config.to_dict(), **meta, "tensors": tensors}
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads(path.read_text())
    arrays = {}
    blobs: dict[str, bytes] = {}
    for name, spec in manifest.pop("tensors").items():
        fname = spec["data_file"]
        if fname not in blobs:
            blobs[fname] = (path.parent / fname).read_bytes()
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(blobs[fname], dtype="<f8", count=count, offset=spec["offset"])
        arrays[name] = arr.reshape(spec["shape"]).astype(np.float64)
    config = TrainConfig.from_dict(manifest.pop("config"))
    return Checkpoint(config, arrays, manifest)


def _load_params(params: dict[str, dc.Tensor], arrays: dict[str, np.ndarray]) -> None:
    stored = {k[len("param/"):] for k in arrays if k.startswith("param/")}
    if stored != set(params):
        missing, extra = sorted(set(params) - stored), sorted(stored - set(params))
        raise ArchitectureMismatch(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, p in params.items():
        arr = arrays[f"param/{k}"]
        if arr.shape != p.shape:
            raise ArchitectureMismatch(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
        p.data[...] = arr


def load_model(path: str | Path, dataset: Dataset, config: TrainConfig | None = None
               ) -> tuple[Planner, np.ndarray, TrainConfig]:
    """Rebuild a planner from a checkpoint; ``config`` overrides must match its architecture."""
    ckpt = load_checkpoint(path)
    cfg = config or ckpt.config
    if cfg.horizon != ckpt.config.horizon:
        raise ValueError(f"horizon mismatch: checkpoint T={ckpt.config.horizon}, requested T={cfg.horizon}")
    model = build_model(cfg, dataset, np.random.default_rng(0))
    _load_params(model.named_parameters(), ckpt.arrays)
    return model, ckpt.arrays["prior"], cfg


def evaluate(checkpoint: str | Path, dataset: Dataset, split: str = "test",
             config: TrainConfig | None = None, preds_path: str | Path | None = None) -> EvalReport:
    model, prior, cfg = load_model(checkpoint, dataset, config)
    plans = make_splits(dataset, cfg).get(split)
    if any(p.T != cfg.horizon for p in plans):
        raise ValueError("checkpoint horizon does not match the split")
    pred = predict(model, plans, prior)
    if preds_path is not None:
        pred.dump(preds_path)
    return report_from_predictions(pred, dataset.world)


# -- entry points ----------------------------------------------------------------------

@dataclass
class TrainResult:
    trainer: Trainer
    history: list[EpochLog]
    best_path: Path | None = None
    final_path: Path | None = None


def train(config: TrainConfig, dataset: Dataset, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None, until: int | None = None) -> TrainResult:
    """Train with DropRelation on; writes best.json/final.json and metrics.jsonl to ``out_dir``."""
    trainer = Trainer(config, dataset)
    if resume_from is not None:
        trainer.restore(load_checkpoint(resume_from))
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = out_dir / "metrics.jsonl"
        if resume_from is None and metrics.exists():
            metrics.unlink()
    try:
        trainer.run(until, metrics)
    except TrainingDiverged:
        if out_dir is not None:
            (out_dir / "diverged.json").write_text(json.dumps({
                "epoch": trainer.epoch, "config": config.to_dict(),
                "history": [asdict(h) for h in trainer.history],
                "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in trainer.params.items()},
            }, indent=1))
        raise
    result = TrainResult(trainer, trainer.history)
    if out_dir is not None:
        result.final_path = trainer.save(out_dir / "final.json")
        best = trainer.best_state or trainer.state_arrays()
        result.best_path = trainer.save(out_dir / "best.json", best)
    return result


def best_model(trainer: Trainer) -> Planner:
    """A copy of the trainer's model carrying the best-by-validation weights."""
    model = build_model(trainer.config, trainer.dataset, np.random.default_rng(0))
    state = trainer.best_state or trainer.state_arrays()
    _load_params(model.named_parameters(), state)
    return model


def run_trials(config: TrainConfig, dataset: Dataset, seeds: Iterable[int] = (0, 1, 2),
               split: str = "test") -> tuple[dict[str, float], list[EvalReport]]:
    """Train once per seed and average the headline metrics."""
    reports = []
    for seed in seeds:
        trainer = train(replace(config, seed=seed), dataset).trainer
        reports.append(evaluate_model(best_model(trainer), trainer.splits.get(split),
                                      trainer.prior, dataset.world))
    keys = ("sr", "macc", "miou", "miou_pooled", "event_conflict_rate", "mae")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}, reports


DROP_RATE_GRID = (0.0, 0.05, 0.1, 0.2, 0.3, 0.4)
ARM_DEPTH_GRID = (1, 2, 3, 4)


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(config: TrainConfig, dataset: Dataset, grid: dict[str, Sequence],
          seeds: Sequence[int] = (0,)) -> list[dict]:
    """Train and test every grid point; returns one row per point with mean metrics."""
    rows = []
    base = config.to_dict()
    for point in expand_grid(grid):
        cfg = TrainConfig.from_dict({**base, **point})
        means, _ = run_trials(cfg, dataset, seeds)
        rows.append({**point, **means})
    return rows


def format_table(rows: list[dict], columns: Sequence[str] | None = None) -> str:
    """Aligned text table with four-decimal floats."""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def pivot_table(rows: list[dict], row_key: str, col_key: str, metric: str = "sr") -> str:
    """Rows by ``row_key``, columns by ``col_key`` (e.g. horizon x drop rate)."""
    rvals = sorted({r[row_key] for r in rows})
    cvals = sorted({r[col_key] for r in rows})
    table = {(r[row_key], r[col_key]): r[metric] for r in rows}
    out = [{row_key: rv, **{str(cv): table.get((rv, cv), float("nan")) for cv in cvals}} for rv in rvals]
    return format_table(out, [row_key] + [str(c) for c in cvals])
