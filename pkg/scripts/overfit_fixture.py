"""Memorization sweep on the bundled fixture over regularizer weights and seeds.

    python scripts/overfit_fixture.py --lambdas 0 0.01 0.1 --seeds 7 0 1
"""
import argparse
import time
from pathlib import Path

from emonext.data import parse_csv
from emonext.model import build, preset
from emonext.train import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", type=Path, default=ROOT / "fixtures" / "fer_mini.csv")
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.01, 0.1])
    ap.add_argument("--seeds", type=int, nargs="+", default=[7])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=16)
    args = ap.parse_args()

    samples, _ = parse_csv(args.data)
    print(f"{'lambda':>8} {'seed':>5} {'train_acc':>10} {'loss_ce':>9} {'loss_sa':>10} {'secs':>6}")
    for lam in args.lambdas:
        for seed in args.seeds:
            t0 = time.perf_counter()
            cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=seed)
            state = train(build(preset("micro", sa_lambda=lam), rng=seed), samples, cfg)
            last = state.history[-1]
            print(f"{lam:>8g} {seed:>5} {last.train_acc:>10.4f} {last.loss_ce:>9.4f} {last.loss_sa:>10.2e} "
                  f"{time.perf_counter() - t0:>6.1f}")  # fmt: skip


if __name__ == "__main__":
    main()
