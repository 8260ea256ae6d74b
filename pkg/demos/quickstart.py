"""Train a small planner on a synthetic world and read off a few plans.

    python3 demos/quickstart.py [--epochs 15]

A world of four events over twenty actions is generated, the planner is
trained for a handful of epochs, and a few test plans are printed next to
the ground truth with their action names.
"""
import argparse

from procplan.data import make_dataset
from procplan.train import TrainConfig, Trainer, best_model, predict, report_from_predictions


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--epochs", type=int, default=15)
    args = parser.parse_args()

    ds = make_dataset(E=4, N=20, actions_per_event=5, sigma=0.1, seed=0,
                      n_videos=300, video_length=8, determinism=0.95)
    world = ds.world
    print("events:")
    for ev in world.events:
        print(f"  {ev.name}: " + ", ".join(world.actions[a].name for a in ev.action_ids))

    trainer = Trainer(TrainConfig(epochs=args.epochs), ds)
    print(f"\n{len(trainer.splits.train)} training plans, {len(trainer.splits.test)} test plans")
    for log in trainer.run():
        print(f"epoch {log.epoch:3d}  loss {log.total:7.4f}  train SR {log.train_sr:.3f}  val SR {log.val_sr:.3f}")

    # Viterbi decoding with the transition prior counted from training plans
    pred = predict(best_model(trainer), trainer.splits.test, trainer.prior)
    names = world.action_names()
    print("\nsample plans (prediction | truth):")
    for p, g in list(zip(pred.preds, pred.gts))[:6]:
        mark = "ok " if p == g else "   "
        print(f"  {mark}{' -> '.join(names[a] for a in p)}  |  {' -> '.join(names[a] for a in g)}")

    print()
    print(report_from_predictions(pred, world).table())


if __name__ == "__main__":
    main()
