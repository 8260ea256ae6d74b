"""What DropRelation does to the attention mask between action tokens.

    python3 demos/drop_relation.py

The deterministic mask hides each token from itself, so every action is
predicted from the others. During training extra relations are dropped at
rate tau, but a row never loses all of them.
"""
import numpy as np

from procplan.arm import deterministic_mask, drop_relation_mask
from procplan.train import DROP_RATE_GRID


def main() -> None:
    print("deterministic mask, T=4:")
    print(deterministic_mask(4).astype(int))

    rng = np.random.default_rng(0)
    print("\nthree training masks at tau=0.4:")
    for _ in range(3):
        print(drop_relation_mask(4, 0.4, rng).astype(int), end="\n\n")

    print("dropped fraction of off-diagonal entries over 10k draws")
    print("  T   " + "  ".join(f"{tau:>6}" for tau in DROP_RATE_GRID))
    for T in (3, 4, 5, 6):
        off = ~np.eye(T, dtype=bool)
        row = []
        for tau in DROP_RATE_GRID:
            masks = np.stack([drop_relation_mask(T, tau, rng) for _ in range(10_000)])
            row.append(1 - masks[:, off].mean())
        print(f"  {T}   " + "  ".join(f"{x:6.3f}" for x in row))
    print("\nShort horizons fall below tau: a row that loses every relation gets one back.")


if __name__ == "__main__":
    main()
