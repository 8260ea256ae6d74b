"""Command-line entry points: gen-data, train, eval, sweep, analyze."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import load_dataset, make_dataset, save_dataset
from .train import (ARM_DEPTH_GRID, DROP_RATE_GRID, TrainConfig, evaluate, format_table,
                    load_predictions, pivot_table, report_from_predictions, sweep, train)

WORLD_KEYS = {"E", "N", "actions_per_event", "sigma", "seed", "n_videos", "video_length",
              "overlap", "determinism", "max_horizon"}


def _read_json(path: str | None) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _write_report(report: dict, path: str | None) -> None:
    if path:
        Path(path).write_text(json.dumps(report, indent=1))


def cmd_gen_data(args) -> int:
    spec = _read_json(args.config)
    unknown = set(spec) - WORLD_KEYS
    if unknown:
        raise SystemExit(f"unknown world keys: {sorted(unknown)}")
    if isinstance(spec.get("video_length"), list):
        spec["video_length"] = tuple(spec["video_length"])
    ds = make_dataset(**spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.videos)} videos, {ds.world.n_events} events, "
          f"{ds.world.n_actions} actions to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    ds = load_dataset(args.data, args.embeddings)
    result = train(cfg, ds, args.out, resume_from=args.resume, until=args.until)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.total:.4f}, train SR {last.train_sr:.4f}, "
              f"val SR {last.val_sr}")
    print(f"checkpoints: {result.best_path}, {result.final_path}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data, args.embeddings)
    report = evaluate(args.ckpt, ds, args.split, preds_path=args.preds)
    print(report.table())
    _write_report(report.to_dict(), args.report)
    return 0


def cmd_sweep(args) -> int:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    grid = _read_json(args.grid) or {"drop_rate": list(DROP_RATE_GRID)}
    ds = load_dataset(args.data, args.embeddings) if args.data else make_dataset()
    rows = sweep(cfg, ds, grid, seeds=args.seeds)
    keys = list(grid)
    if len(keys) == 2:
        print(pivot_table(rows, keys[0], keys[1], args.metric))
    else:
        print(format_table(rows, keys + ["sr", "macc", "miou", "mae"]))
    _write_report({"grid": grid, "rows": rows}, args.report)
    return 0


def cmd_analyze(args) -> int:
    world = load_dataset(args.world).world
    pred = load_predictions(args.preds)
    report = report_from_predictions(pred, world, use_generator_truth=not args.empirical_truth)
    print(f"event conflict rate  {report.event_conflict_rate:.4f}")
    print(f"mAE                  {report.mae:.4f}")
    for e, ae in sorted(report.ae.items()):
        print(f"AE event {e:<11d} {ae:.4f}")
    _write_report(report.to_dict(), args.report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="procplan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic procedure dataset")
    p.add_argument("--config", help="JSON world spec (E, N, sigma, n_videos, ...)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a planner")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", help="checkpoint manifest to continue from")
    p.add_argument("--until", type=int, help="stop after this epoch")
    p.add_argument("--embeddings", help="pre-extracted text embedding table")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--report")
    p.add_argument("--preds", help="write per-instance predictions as JSON lines")
    p.add_argument("--embeddings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train over a parameter grid")
    p.add_argument("--config")
    p.add_argument("--grid", help=f"JSON grid, e.g. {{\"drop_rate\": {list(DROP_RATE_GRID)}}} "
                                  f"or {{\"arm_layers\": {list(ARM_DEPTH_GRID)}}}")
    p.add_argument("--data")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--metric", default="sr")
    p.add_argument("--report")
    p.add_argument("--embeddings")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="event conflicts and transition-matrix error")
    p.add_argument("--preds", required=True)
    p.add_argument("--world", required=True, help="dataset file holding the world")
    p.add_argument("--empirical-truth", action="store_true",
                   help="count reference transitions from ground-truth plans")
    p.add_argument("--report")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
